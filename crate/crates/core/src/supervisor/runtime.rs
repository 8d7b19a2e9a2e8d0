//! Runtime wiring for the supervisor core: a single event-loop thread
//! owns the state machine; spawners execute its actions against real
//! processes (POSIX signals to the process group) or a test stand-in.

use std::collections::HashMap;
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::clock::Clock;
use crate::event::HotplugEvent;

use super::core::{Action, DeviceSnapshot, Input, SupervisorCore, TransitionRecord};

/// Executes supervisor actions. `signal_*` address the whole process
/// group so grandchildren die with their parent.
pub trait Spawner: Send {
    fn spawn(&mut self, name: &str, command: &str) -> Result<(), String>;
    fn signal_term(&mut self, name: &str);
    fn signal_kill(&mut self, name: &str);
    fn run_detach_hook(&mut self, name: &str, command: &str);
}

#[derive(Debug)]
pub enum Msg {
    Event(HotplugEvent),
    ChildExited { name: String, ok: bool },
    Heartbeat { name: String, seq: u64 },
    Query(Sender<Vec<DeviceSnapshot>>),
    TakeTransitions(Sender<Vec<TransitionRecord>>),
    Shutdown,
}

/// Cloneable front door to a running supervisor loop.
#[derive(Clone)]
pub struct SupervisorHandle {
    tx: Sender<Msg>,
    presence: Arc<AtomicU64>,
    device_count: u8,
}

impl SupervisorHandle {
    pub fn send_event(&self, event: HotplugEvent) -> bool {
        self.tx.send(Msg::Event(event)).is_ok()
    }

    pub fn child_exited(&self, name: &str, ok: bool) {
        let _ = self.tx.send(Msg::ChildExited { name: name.to_owned(), ok });
    }

    pub fn heartbeat(&self, name: &str, seq: u64) {
        let _ = self.tx.send(Msg::Heartbeat { name: name.to_owned(), seq });
    }

    /// Snapshot of all device states, answered by the loop thread.
    pub fn snapshot(&self) -> Option<Vec<DeviceSnapshot>> {
        let (tx, rx) = std::sync::mpsc::channel();
        self.tx.send(Msg::Query(tx)).ok()?;
        rx.recv_timeout(Duration::from_secs(5)).ok()
    }

    pub fn take_transitions(&self) -> Vec<TransitionRecord> {
        let (tx, rx) = std::sync::mpsc::channel();
        if self.tx.send(Msg::TakeTransitions(tx)).is_err() {
            return Vec::new();
        }
        rx.recv_timeout(Duration::from_secs(5)).unwrap_or_default()
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Msg::Shutdown);
    }

    /// Lock-free presence snapshot for the mask writer thread.
    pub fn presence_word(&self) -> (u64, u8) {
        (self.presence.load(Ordering::SeqCst), self.device_count)
    }

    pub fn sender(&self) -> Sender<Msg> {
        self.tx.clone()
    }
}

pub struct SupervisorRuntime {
    core: SupervisorCore,
    spawner: Box<dyn Spawner>,
    clock: Arc<dyn Clock>,
    rx: Receiver<Msg>,
    tx: Sender<Msg>,
    presence: Arc<AtomicU64>,
}

impl SupervisorRuntime {
    pub fn new(core: SupervisorCore, spawner: Box<dyn Spawner>, clock: Arc<dyn Clock>) -> Self {
        let (tx, rx) = std::sync::mpsc::channel();
        let presence = Arc::new(AtomicU64::new(0));
        Self { core, spawner, clock, rx, tx, presence }
    }

    pub fn handle(&self) -> SupervisorHandle {
        SupervisorHandle {
            tx: self.tx.clone(),
            presence: self.presence.clone(),
            device_count: self.core.registry().len() as u8,
        }
    }

    /// Starts the loop thread; it exits on Shutdown, terminating every
    /// live child first.
    pub fn start(mut self) -> std::thread::JoinHandle<()> {
        std::thread::Builder::new()
            .name("supervisor".into())
            .spawn(move || self.run())
            .expect("spawn supervisor thread")
    }

    fn run(&mut self) {
        loop {
            let now = self.clock.now_ns();
            let timeout = self
                .core
                .next_deadline()
                .map(|d| Duration::from_nanos(d.saturating_sub(now)))
                .unwrap_or(Duration::from_millis(200));
            let msg = match self.rx.recv_timeout(timeout) {
                Ok(msg) => Some(msg),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return,
            };
            let now = self.clock.now_ns();
            let input = match msg {
                Some(Msg::Event(e)) => Input::Event(e),
                Some(Msg::ChildExited { name, ok }) => Input::ChildExited { name, ok },
                Some(Msg::Heartbeat { name, seq }) => Input::Heartbeat { name, seq },
                Some(Msg::Query(reply)) => {
                    let _ = reply.send(self.core.snapshot());
                    continue;
                }
                Some(Msg::TakeTransitions(reply)) => {
                    let _ = reply.send(self.core.take_transitions());
                    continue;
                }
                Some(Msg::Shutdown) => break,
                None => Input::Tick,
            };
            let actions = self.core.handle(input, now);
            self.execute(actions);
            let (word, _) = self.core.presence_word();
            self.presence.store(word, Ordering::SeqCst);
        }
        self.terminate_all();
    }

    fn execute(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Spawn { name, command } => {
                    if let Err(e) = self.spawner.spawn(&name, &command) {
                        log::warn!("spawn {name} failed: {e}");
                        // Route spawn failure through the crash path so it
                        // retries with backoff.
                        let _ = self.tx.send(Msg::ChildExited { name, ok: false });
                    }
                }
                Action::SignalTerm { name } => self.spawner.signal_term(&name),
                Action::SignalKill { name } => self.spawner.signal_kill(&name),
                Action::RunDetachHook { name, command } => {
                    self.spawner.run_detach_hook(&name, &command)
                }
                Action::Log(message) => log::info!("{message}"),
            }
        }
    }

    fn terminate_all(&mut self) {
        let names: Vec<String> = self
            .core
            .snapshot()
            .iter()
            .filter(|s| {
                matches!(
                    s.state,
                    super::DeviceState::Online
                        | super::DeviceState::AttachedStarting
                        | super::DeviceState::Detaching
                )
            })
            .map(|s| s.name.clone())
            .collect();
        for name in &names {
            self.spawner.signal_term(name);
        }
        if !names.is_empty() {
            std::thread::sleep(Duration::from_millis(300));
            for name in &names {
                self.spawner.signal_kill(name);
            }
        }
    }
}

/// Real child processes, each in its own process group. A reaper thread
/// per child reports exit back into the supervisor loop.
pub struct ProcessSpawner {
    children: HashMap<String, i32>,
    notify: Option<Sender<Msg>>,
    env: Vec<(String, String)>,
}

impl ProcessSpawner {
    pub fn new(env: Vec<(String, String)>) -> Self {
        Self { children: HashMap::new(), notify: None, env }
    }

    /// Channel for exit notifications; normally the supervisor's own
    /// message sender.
    pub fn with_notify(mut self, notify: Sender<Msg>) -> Self {
        self.notify = Some(notify);
        self
    }

    fn signal_group(&self, name: &str, sig: i32) {
        if let Some(&pgid) = self.children.get(name) {
            unsafe {
                libc::killpg(pgid, sig);
            }
        }
    }
}

impl Spawner for ProcessSpawner {
    fn spawn(&mut self, name: &str, command: &str) -> Result<(), String> {
        use std::os::unix::process::CommandExt;
        let parts: Vec<&str> = command.split_whitespace().collect();
        let (program, args) = parts.split_first().ok_or("empty command")?;
        let mut cmd = std::process::Command::new(program);
        cmd.args(args).process_group(0);
        for (k, v) in &self.env {
            cmd.env(k, v);
        }
        let mut child = cmd.spawn().map_err(|e| e.to_string())?;
        let pid = child.id() as i32;
        self.children.insert(name.to_owned(), pid);
        if let Some(notify) = self.notify.clone() {
            let name = name.to_owned();
            std::thread::Builder::new()
                .name(format!("reap-{name}"))
                .spawn(move || {
                    let ok = child.wait().map(|s| s.success()).unwrap_or(false);
                    let _ = notify.send(Msg::ChildExited { name, ok });
                })
                .expect("spawn reaper thread");
        }
        Ok(())
    }

    fn signal_term(&mut self, name: &str) {
        self.signal_group(name, libc::SIGTERM);
    }

    fn signal_kill(&mut self, name: &str) {
        self.signal_group(name, libc::SIGKILL);
    }

    fn run_detach_hook(&mut self, name: &str, command: &str) {
        let parts: Vec<&str> = command.split_whitespace().collect();
        if let Some((program, args)) = parts.split_first() {
            match std::process::Command::new(program).args(args).status() {
                Ok(status) if status.success() => {}
                Ok(status) => log::warn!("on_detach for {name} exited with {status}"),
                Err(e) => log::warn!("on_detach for {name} failed to start: {e}"),
            }
        }
    }
}

/// Processless spawner for benchmarks and tests that only exercise the
/// presence path: every spawned device heartbeats immediately and goes
/// Online on the next loop iteration.
pub struct InstantOnlineSpawner {
    notify: Sender<Msg>,
}

impl InstantOnlineSpawner {
    pub fn new(notify: Sender<Msg>) -> Self {
        Self { notify }
    }
}

impl Spawner for InstantOnlineSpawner {
    fn spawn(&mut self, name: &str, _command: &str) -> Result<(), String> {
        let _ = self.notify.send(Msg::Heartbeat { name: name.to_owned(), seq: 0 });
        Ok(())
    }

    fn signal_term(&mut self, name: &str) {
        let _ = self.notify.send(Msg::ChildExited { name: name.to_owned(), ok: true });
    }

    fn signal_kill(&mut self, name: &str) {
        let _ = self.notify.send(Msg::ChildExited { name: name.to_owned(), ok: false });
    }

    fn run_detach_hook(&mut self, _name: &str, _command: &str) {}
}

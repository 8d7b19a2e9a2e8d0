//! Daemon assembly: wires the event bus, supervisor, mask publisher,
//! heartbeat listener, control socket, and the live mask topic into one
//! startable unit. `rapidctl run` is a thin front-end over this; tests
//! embed it in-process.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixDatagram, UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, MonotonicClock};
use crate::event::{event_bus, parse_inject_line, EventKind, EventSender};
#[cfg(test)]
use crate::event::HotplugEvent;
use crate::maskpub::{read_raw, MaskChannel, Shutdown};
use crate::registry::{match_device, Registry};
use crate::supervisor::{
    DeviceSnapshot, Spawner, SupervisorConfig, SupervisorCore, SupervisorHandle,
    SupervisorRuntime,
};
use crate::transport::Publisher;

pub const DEFAULT_MASK_TOPIC: &str = "/rapid/mask";
/// Mask republish period on the live transport topic (100 Hz).
pub const MASK_TOPIC_PERIOD: Duration = Duration::from_millis(10);
const LOG_RING_CAPACITY: usize = 200;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("mask path unwritable: {0}")]
    MaskPath(String),
    #[error("socket setup failed: {0}")]
    Socket(String),
    #[error("transport bind failed: {0}")]
    Transport(String),
}

pub struct DaemonOptions {
    pub registry: Registry,
    pub supervisor_config: SupervisorConfig,
    pub mask_path: PathBuf,
    pub control_socket: PathBuf,
    pub heartbeat_socket: PathBuf,
    pub mask_topic: String,
    /// Bind address for the live mask topic; None disables transport.
    pub transport_listen: Option<String>,
    /// Attach the OS hot-plug adapter when the platform supports it.
    pub os_events: bool,
}

impl DaemonOptions {
    pub fn new(registry: Registry, dir: &Path) -> Self {
        Self {
            registry,
            supervisor_config: SupervisorConfig::default(),
            mask_path: dir.join("mask.bin"),
            control_socket: dir.join("control.sock"),
            heartbeat_socket: dir.join("heartbeat.sock"),
            mask_topic: DEFAULT_MASK_TOPIC.into(),
            transport_listen: Some("127.0.0.1:0".into()),
            os_events: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceRow {
    pub name: String,
    pub bit: u8,
    pub state: String,
    pub attached: bool,
    pub restart_count: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub mask: String,
    pub mask_word: u64,
    pub sequence: u64,
    pub device_count: u8,
    pub devices: Vec<DeviceRow>,
    pub recent_log: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectReply {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

pub struct Daemon {
    handle: SupervisorHandle,
    events: Option<EventSender>,
    shutdown: Shutdown,
    publisher: Option<Arc<Publisher>>,
    mask_path: PathBuf,
    control_socket: PathBuf,
    heartbeat_socket: PathBuf,
    threads: Vec<std::thread::JoinHandle<()>>,
    supervisor_thread: Option<std::thread::JoinHandle<()>>,
}

impl Daemon {
    pub fn start(options: DaemonOptions, spawner: Box<dyn Spawner>) -> Result<Self, DaemonError> {
        let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
        let registry = Arc::new(options.registry);
        let core = SupervisorCore::new(registry.clone(), options.supervisor_config);
        let runtime = SupervisorRuntime::new(core, spawner, clock.clone());
        let handle = runtime.handle();
        let supervisor_thread = runtime.start();

        let shutdown = Shutdown::new();
        let mut threads = Vec::new();
        let log_ring: Arc<Mutex<VecDeque<String>>> = Arc::new(Mutex::new(VecDeque::new()));

        // Mask file publisher at the 2 ms tick.
        {
            let channel = MaskChannel::at(&options.mask_path);
            // Fail fast on an unwritable path before spawning the loop.
            std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(false)
                .open(&options.mask_path)
                .map_err(|e| DaemonError::MaskPath(format!("{}: {e}", options.mask_path.display())))?;
            let h = handle.clone();
            let sd = shutdown.clone();
            let reg = registry.clone();
            threads.push(std::thread::spawn(move || {
                let _ = crate::maskpub::publish_loop(
                    &channel,
                    move || h.presence_word(),
                    Some(&reg),
                    &sd,
                );
            }));
        }

        // Event bus: injected and OS events funnel through one seam.
        let (events, event_rx) = event_bus();
        {
            let h = handle.clone();
            threads.push(std::thread::spawn(move || {
                while let Ok(ev) = event_rx.recv() {
                    h.send_event(ev);
                }
            }));
        }
        if options.os_events {
            if let Err(e) = crate::event::subscribe_os_events(events.clone(), clock.clone()) {
                log::warn!("OS hot-plug adapter unavailable: {e}");
            }
        }

        // Heartbeat listener.
        {
            let _ = std::fs::remove_file(&options.heartbeat_socket);
            let sock = UnixDatagram::bind(&options.heartbeat_socket)
                .map_err(|e| DaemonError::Socket(format!("heartbeat: {e}")))?;
            sock.set_read_timeout(Some(Duration::from_millis(100)))
                .map_err(|e| DaemonError::Socket(e.to_string()))?;
            let h = handle.clone();
            let sd = shutdown.clone();
            threads.push(std::thread::spawn(move || {
                let mut buf = [0u8; 256];
                while !sd.requested() {
                    match sock.recv(&mut buf) {
                        Ok(n) => {
                            if let Some((name, seq)) =
                                parse_heartbeat(&String::from_utf8_lossy(&buf[..n]))
                            {
                                h.heartbeat(&name, seq);
                            }
                        }
                        Err(_) => continue,
                    }
                }
            }));
        }

        // Control socket.
        {
            let _ = std::fs::remove_file(&options.control_socket);
            let listener = UnixListener::bind(&options.control_socket)
                .map_err(|e| DaemonError::Socket(format!("control: {e}")))?;
            listener
                .set_nonblocking(true)
                .map_err(|e| DaemonError::Socket(e.to_string()))?;
            let h = handle.clone();
            let ev = events.clone();
            let reg = registry.clone();
            let sd = shutdown.clone();
            let ring = log_ring.clone();
            let clk = clock.clone();
            let mask_path = options.mask_path.clone();
            threads.push(std::thread::spawn(move || {
                while !sd.requested() {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let h = h.clone();
                            let ev = ev.clone();
                            let reg = reg.clone();
                            let ring = ring.clone();
                            let clk = clk.clone();
                            let mask_path = mask_path.clone();
                            std::thread::spawn(move || {
                                serve_control(stream, &h, &ev, &reg, &ring, &*clk, &mask_path);
                            });
                        }
                        Err(_) => std::thread::sleep(Duration::from_millis(20)),
                    }
                }
            }));
        }

        // Live mask topic over the transport.
        let publisher = match &options.transport_listen {
            Some(addr) => {
                let publisher = Arc::new(
                    Publisher::bind(addr).map_err(|e| DaemonError::Transport(e.to_string()))?,
                );
                let p = publisher.clone();
                let topic = options.mask_topic.clone();
                let path = options.mask_path.clone();
                let sd = shutdown.clone();
                let clk = clock.clone();
                threads.push(std::thread::spawn(move || {
                    let mut last_seq = 0u64;
                    while !sd.requested() {
                        if let Ok(bytes) = read_raw(&path) {
                            let seq = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
                            if seq != last_seq {
                                last_seq = seq;
                                let _ = p.publish(&topic, clk.now_ns(), &bytes);
                            }
                        }
                        std::thread::sleep(MASK_TOPIC_PERIOD);
                    }
                }));
                Some(publisher)
            }
            None => None,
        };

        Ok(Self {
            handle,
            events: Some(events),
            shutdown,
            publisher,
            mask_path: options.mask_path,
            control_socket: options.control_socket,
            heartbeat_socket: options.heartbeat_socket,
            threads,
            supervisor_thread: Some(supervisor_thread),
        })
    }

    pub fn handle(&self) -> &SupervisorHandle {
        &self.handle
    }

    pub fn events(&self) -> &EventSender {
        self.events.as_ref().expect("daemon running")
    }

    pub fn mask_path(&self) -> &Path {
        &self.mask_path
    }

    pub fn control_socket(&self) -> &Path {
        &self.control_socket
    }

    pub fn heartbeat_socket(&self) -> &Path {
        &self.heartbeat_socket
    }

    /// Bound address of the live mask topic, when transport is enabled.
    pub fn transport_addr(&self) -> Option<String> {
        self.publisher.as_ref().map(|p| p.local_addr().to_string())
    }

    /// Graceful stop: terminate children, stop all service threads,
    /// remove sockets.
    pub fn stop(mut self) {
        self.handle.shutdown();
        if let Some(t) = self.supervisor_thread.take() {
            let _ = t.join();
        }
        self.shutdown.request();
        self.events = None; // closes the event bus so the forwarder exits
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.control_socket);
        let _ = std::fs::remove_file(&self.heartbeat_socket);
    }
}

fn parse_heartbeat(line: &str) -> Option<(String, u64)> {
    let mut parts = line.trim().split_whitespace();
    if parts.next()? != "HB" {
        return None;
    }
    let name = parts.next()?.to_owned();
    let seq = parts.next()?.parse().ok()?;
    Some((name, seq))
}

fn serve_control(
    stream: UnixStream,
    handle: &SupervisorHandle,
    events: &EventSender,
    registry: &Registry,
    log_ring: &Mutex<VecDeque<String>>,
    clock: &dyn Clock,
    mask_path: &Path,
) {
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = if line.contains("\"cmd\"") {
            match serde_json::from_str::<serde_json::Value>(&line) {
                Ok(v) if v.get("cmd").and_then(|c| c.as_str()) == Some("status") => {
                    let snap = handle.snapshot().unwrap_or_default();
                    drain_transitions(handle, log_ring);
                    let recent: Vec<String> =
                        log_ring.lock().unwrap().iter().cloned().collect();
                    let sequence = read_raw(mask_path)
                        .map(|b| u64::from_le_bytes(b[24..32].try_into().unwrap()))
                        .unwrap_or(0);
                    serde_json::to_string(&build_status(&snap, sequence, recent))
                        .unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
                }
                _ => "{\"error\":\"unknown command\"}".to_owned(),
            }
        } else {
            handle_inject(&line, handle, events, registry, clock)
        };
        if writer.write_all(reply.as_bytes()).is_err() || writer.write_all(b"\n").is_err() {
            break;
        }
    }
}

pub fn build_status(snap: &[DeviceSnapshot], sequence: u64, recent_log: Vec<String>) -> StatusSnapshot {
    // The mask word is derived from the same snapshot as the rows, so a
    // status reply never mixes epochs.
    let mut word = 0u64;
    let mut devices = Vec::with_capacity(snap.len());
    for d in snap {
        if format!("{:?}", d.state) == "Online" {
            word |= 1 << d.bit;
        }
        devices.push(DeviceRow {
            name: d.name.clone(),
            bit: d.bit,
            state: format!("{:?}", d.state),
            attached: d.attached,
            restart_count: d.restart_count,
        });
    }
    StatusSnapshot {
        mask: format!("0x{word:02X}"),
        mask_word: word,
        sequence,
        device_count: snap.len() as u8,
        devices,
        recent_log,
    }
}

fn drain_transitions(handle: &SupervisorHandle, ring: &Mutex<VecDeque<String>>) {
    let new = handle.take_transitions();
    let mut ring = ring.lock().unwrap();
    for t in new {
        ring.push_back(format!(
            "[{:>12}ns] {}: {:?} -> {:?}",
            t.at_ns, t.name, t.from, t.to
        ));
        while ring.len() > LOG_RING_CAPACITY {
            ring.pop_front();
        }
    }
}

fn handle_inject(
    line: &str,
    handle: &SupervisorHandle,
    events: &EventSender,
    registry: &Registry,
    clock: &dyn Clock,
) -> String {
    let event = match parse_inject_line(line, clock.now_ns()) {
        Ok(e) => e,
        Err(e) => {
            return serde_json::to_string(&InjectReply {
                ok: false,
                device: None,
                state: None,
                warning: None,
                reason: Some(e.to_string()),
            })
            .unwrap()
        }
    };
    let before = handle.snapshot().unwrap_or_default();
    let occupancy: std::collections::HashSet<String> =
        before.iter().filter(|d| d.attached).map(|d| d.name.clone()).collect();
    let matched = match_device(&event.identity, registry, &occupancy).map(|d| d.name.clone());

    let Some(name) = matched else {
        return serde_json::to_string(&InjectReply {
            ok: false,
            device: None,
            state: None,
            warning: None,
            reason: Some("no_match".into()),
        })
        .unwrap();
    };
    let was_attached =
        before.iter().find(|d| d.name == name).map(|d| d.attached).unwrap_or(false);
    let warning = if event.kind == EventKind::Detach && !was_attached {
        Some(format!("orphan detach: {name} was not attached"))
    } else {
        None
    };

    let before_state = before
        .iter()
        .find(|d| d.name == name)
        .map(|d| format!("{:?}", d.state))
        .unwrap_or_else(|| "Unknown".into());
    let _ = events.inject(event);
    // The event crosses the bus on another thread; wait briefly for the
    // device to move so the reply reflects the injection.
    let deadline = std::time::Instant::now() + Duration::from_millis(300);
    let state = loop {
        let after = handle.snapshot().unwrap_or_default();
        let now_state = after
            .iter()
            .find(|d| d.name == name)
            .map(|d| format!("{:?}", d.state))
            .unwrap_or_else(|| "Unknown".into());
        if now_state != before_state || std::time::Instant::now() > deadline {
            break now_state;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    serde_json::to_string(&InjectReply {
        ok: true,
        device: Some(name),
        state: Some(state),
        warning,
        reason: None,
    })
    .unwrap()
}

/// Client side of the control socket: send one line, read one reply line.
pub fn control_request(socket: &Path, line: &str) -> std::io::Result<String> {
    let mut stream = UnixStream::connect(socket)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    stream.write_all(line.as_bytes())?;
    stream.write_all(b"\n")?;
    let mut reader = BufReader::new(stream);
    let mut reply = String::new();
    reader.read_line(&mut reply)?;
    Ok(reply.trim_end().to_owned())
}


/// Starts a daemon whose spawner needs the supervisor's own message
/// sender (exit notifications, synthesized heartbeats). `Daemon::start`
/// builds the runtime internally, so the real spawner is constructed
/// after startup and threaded through a slot; no event can arrive before
/// the slot is filled because injection requires the returned daemon.
pub fn start_deferred(
    options: DaemonOptions,
    factory: impl FnOnce(std::sync::mpsc::Sender<crate::supervisor::Msg>) -> Box<dyn Spawner>,
) -> Result<Daemon, DaemonError> {
    struct LateSpawner {
        inner: Option<Box<dyn Spawner>>,
        slot: Arc<Mutex<Option<Box<dyn Spawner>>>>,
    }
    impl LateSpawner {
        fn resolve(&mut self) -> Option<&mut Box<dyn Spawner>> {
            if self.inner.is_none() {
                self.inner = self.slot.lock().unwrap().take();
            }
            self.inner.as_mut()
        }
    }
    impl Spawner for LateSpawner {
        fn spawn(&mut self, name: &str, command: &str) -> Result<(), String> {
            match self.resolve() {
                Some(s) => s.spawn(name, command),
                None => Err("spawner not wired".into()),
            }
        }
        fn signal_term(&mut self, name: &str) {
            if let Some(s) = self.resolve() {
                s.signal_term(name);
            }
        }
        fn signal_kill(&mut self, name: &str) {
            if let Some(s) = self.resolve() {
                s.signal_kill(name);
            }
        }
        fn run_detach_hook(&mut self, name: &str, command: &str) {
            if let Some(s) = self.resolve() {
                s.run_detach_hook(name, command);
            }
        }
    }
    let slot: Arc<Mutex<Option<Box<dyn Spawner>>>> = Arc::new(Mutex::new(None));
    let daemon = Daemon::start(options, Box::new(LateSpawner { inner: None, slot: slot.clone() }))?;
    *slot.lock().unwrap() = Some(factory(daemon.handle().sender()));
    Ok(daemon)
}

/// Starts a daemon whose spawner reports children online instantly —
/// no real processes. Used by benchmarks and latency tests where the
/// mask path, not process startup, is under measurement.
pub fn start_instant(options: DaemonOptions) -> Daemon {
    start_deferred(options, |sender| {
        Box::new(crate::supervisor::InstantOnlineSpawner::new(sender))
    })
    .expect("daemon start")
}

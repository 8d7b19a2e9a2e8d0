//! Deterministic supervisor state machine. All timing comes from the
//! `now_ns` stamped on each input, so tests drive it with a simulated
//! clock and identical input traces produce identical transition logs.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;


use crate::event::{EventKind, HotplugEvent};
use crate::registry::{match_device, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DeviceState {
    Offline,
    AttachedStarting,
    Online,
    Backoff,
    Detaching,
}

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    pub cooldown: Duration,
    pub grace: Duration,
    pub backoff_base: Duration,
    pub backoff_max_attempts: u32,
    pub backoff_window: Duration,
    pub heartbeat_interval: Duration,
    pub heartbeat_misses_fatal: u32,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            cooldown: Duration::from_secs(2),
            grace: Duration::from_secs(5),
            backoff_base: Duration::from_secs(1),
            backoff_max_attempts: 5,
            backoff_window: Duration::from_secs(60),
            heartbeat_interval: Duration::from_secs(1),
            heartbeat_misses_fatal: 3,
        }
    }
}

impl SupervisorConfig {
    fn backoff_delay_ns(&self, attempt: u32) -> u64 {
        self.backoff_base.as_nanos() as u64 * (1u64 << (attempt - 1))
    }
}

/// Per-device runtime record.
#[derive(Debug, Clone)]
struct DeviceRuntime {
    state: DeviceState,
    /// Physical presence per the last attach/detach event.
    attached: bool,
    restart_count: u32,
    backoff_deadline: Option<u64>,
    last_heartbeat: Option<u64>,
    cooldown_until: Option<u64>,
    /// Attach arrived during cooldown or while the old process was still
    /// terminating; spawn once both clear.
    pending_attach: bool,
    grace_deadline: Option<u64>,
    last_crash_ns: Option<u64>,
    /// The next child exit was requested by us and is not a crash.
    expect_exit: bool,
    /// Backoff budget exhausted; offline until the next physical event.
    failed: bool,
}

impl DeviceRuntime {
    fn new() -> Self {
        Self {
            state: DeviceState::Offline,
            attached: false,
            restart_count: 0,
            backoff_deadline: None,
            last_heartbeat: None,
            cooldown_until: None,
            pending_attach: false,
            grace_deadline: None,
            last_crash_ns: None,
            expect_exit: false,
            failed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Event(HotplugEvent),
    ChildExited { name: String, ok: bool },
    Heartbeat { name: String, seq: u64 },
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Spawn { name: String, command: String },
    SignalTerm { name: String },
    SignalKill { name: String },
    RunDetachHook { name: String, command: String },
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransitionRecord {
    pub at_ns: u64,
    pub name: String,
    pub from: DeviceState,
    pub to: DeviceState,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceSnapshot {
    pub name: String,
    pub bit: u8,
    pub state: DeviceState,
    pub attached: bool,
    pub restart_count: u32,
}

pub struct SupervisorCore {
    registry: Arc<Registry>,
    config: SupervisorConfig,
    devices: BTreeMap<String, DeviceRuntime>,
    transitions: Vec<TransitionRecord>,
}

impl SupervisorCore {
    pub fn new(registry: Arc<Registry>, config: SupervisorConfig) -> Self {
        let devices =
            registry.descriptors.iter().map(|d| (d.name.clone(), DeviceRuntime::new())).collect();
        Self { registry, config, devices, transitions: Vec::new() }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.config
    }

    /// Names currently bound to a physical device; feeds model-match
    /// occupancy so one model entry binds at most one unit.
    fn occupancy(&self) -> HashSet<String> {
        self.devices
            .iter()
            .filter(|(_, d)| d.attached)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Bit i set iff the device assigned bit i is Online.
    pub fn presence_word(&self) -> (u64, u8) {
        let mut word = 0u64;
        for desc in &self.registry.descriptors {
            if let Some(dev) = self.devices.get(&desc.name) {
                if dev.state == DeviceState::Online {
                    word |= 1 << desc.bit;
                }
            }
        }
        (word, self.registry.len() as u8)
    }

    pub fn snapshot(&self) -> Vec<DeviceSnapshot> {
        self.registry
            .descriptors
            .iter()
            .map(|desc| {
                let dev = &self.devices[&desc.name];
                DeviceSnapshot {
                    name: desc.name.clone(),
                    bit: desc.bit,
                    state: dev.state,
                    attached: dev.attached,
                    restart_count: dev.restart_count,
                }
            })
            .collect()
    }

    pub fn state_of(&self, name: &str) -> Option<DeviceState> {
        self.devices.get(name).map(|d| d.state)
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    pub fn take_transitions(&mut self) -> Vec<TransitionRecord> {
        std::mem::take(&mut self.transitions)
    }

    /// Earliest pending deadline (cooldown expiry, backoff respawn,
    /// grace escalation, heartbeat staleness); the runtime sleeps until
    /// it and delivers a Tick.
    pub fn next_deadline(&self) -> Option<u64> {
        let hb_budget =
            self.config.heartbeat_interval.as_nanos() as u64 * self.config.heartbeat_misses_fatal as u64;
        let mut min: Option<u64> = None;
        let mut consider = |d: Option<u64>| {
            if let Some(t) = d {
                min = Some(min.map_or(t, |m| m.min(t)));
            }
        };
        for dev in self.devices.values() {
            if dev.pending_attach && dev.state == DeviceState::Offline {
                consider(dev.cooldown_until);
            }
            if dev.state == DeviceState::Backoff {
                consider(dev.backoff_deadline);
            }
            if dev.state == DeviceState::Detaching {
                consider(dev.grace_deadline);
            }
            if dev.state == DeviceState::Online {
                consider(dev.last_heartbeat.map(|t| t + hb_budget));
            }
        }
        min
    }

    fn transition(&mut self, name: &str, to: DeviceState, now_ns: u64) {
        let dev = self.devices.get_mut(name).expect("known device");
        if dev.state != to {
            self.transitions.push(TransitionRecord {
                at_ns: now_ns,
                name: name.to_owned(),
                from: dev.state,
                to,
            });
            dev.state = to;
        }
    }

    pub fn handle(&mut self, input: Input, now_ns: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        match input {
            Input::Event(event) => self.handle_event(event, now_ns, &mut actions),
            Input::ChildExited { name, ok } => self.handle_exit(&name, ok, now_ns, &mut actions),
            Input::Heartbeat { name, .. } => self.handle_heartbeat(&name, now_ns, &mut actions),
            Input::Tick => {}
        }
        self.process_deadlines(now_ns, &mut actions);
        actions
    }

    fn handle_event(&mut self, event: HotplugEvent, now_ns: u64, actions: &mut Vec<Action>) {
        let occupancy = self.occupancy();
        let Some(desc) = match_device(&event.identity, &self.registry, &occupancy) else {
            actions.push(Action::Log(match event.kind {
                EventKind::Attach => {
                    format!("unmatched attach {} ignored", event.identity)
                }
                EventKind::Detach => {
                    format!("orphan detach {} ignored", event.identity)
                }
            }));
            return;
        };
        let name = desc.name.clone();
        let command = desc.on_attach.clone();
        match event.kind {
            EventKind::Attach => {
                let dev = self.devices.get_mut(&name).unwrap();
                if dev.attached {
                    actions.push(Action::Log(format!(
                        "duplicate attach for {name}; extra unit ignored"
                    )));
                    return;
                }
                dev.attached = true;
                dev.failed = false;
                dev.restart_count = 0;
                dev.last_crash_ns = None;
                let in_cooldown = dev.cooldown_until.is_some_and(|t| now_ns < t);
                let terminating = dev.state == DeviceState::Detaching;
                if in_cooldown || terminating {
                    dev.pending_attach = true;
                    actions.push(Action::Log(format!(
                        "attach for {name} deferred ({})",
                        if terminating { "previous process terminating" } else { "cooldown" }
                    )));
                } else {
                    self.spawn(&name, &command, now_ns, actions);
                }
            }
            EventKind::Detach => {
                let dev = self.devices.get_mut(&name).unwrap();
                if !dev.attached {
                    actions.push(Action::Log(format!("orphan detach for {name} ignored")));
                    return;
                }
                dev.attached = false;
                dev.pending_attach = false;
                dev.cooldown_until = Some(now_ns + self.config.cooldown.as_nanos() as u64);
                dev.restart_count = 0;
                dev.last_crash_ns = None;
                dev.backoff_deadline = None;
                dev.failed = false;
                match dev.state {
                    DeviceState::Online | DeviceState::AttachedStarting => {
                        dev.expect_exit = true;
                        dev.grace_deadline = Some(now_ns + self.config.grace.as_nanos() as u64);
                        self.transition(&name, DeviceState::Detaching, now_ns);
                        actions.push(Action::SignalTerm { name: name.clone() });
                    }
                    DeviceState::Backoff => {
                        // No live process; cancel the pending respawn.
                        self.transition(&name, DeviceState::Offline, now_ns);
                    }
                    DeviceState::Detaching | DeviceState::Offline => {}
                }
            }
        }
    }

    fn spawn(&mut self, name: &str, command: &str, now_ns: u64, actions: &mut Vec<Action>) {
        let dev = self.devices.get_mut(name).unwrap();
        dev.pending_attach = false;
        dev.last_heartbeat = None;
        dev.expect_exit = false;
        self.transition(name, DeviceState::AttachedStarting, now_ns);
        actions.push(Action::Spawn { name: name.to_owned(), command: command.to_owned() });
    }

    fn handle_exit(&mut self, name: &str, ok: bool, now_ns: u64, actions: &mut Vec<Action>) {
        let Some(dev) = self.devices.get_mut(name) else {
            return;
        };
        if dev.state == DeviceState::Detaching {
            dev.expect_exit = false;
            dev.grace_deadline = None;
            if let Some(hook) =
                self.registry.by_name(name).and_then(|d| d.on_detach.clone())
            {
                actions.push(Action::RunDetachHook { name: name.to_owned(), command: hook });
            }
            self.transition(name, DeviceState::Offline, now_ns);
            return;
        }
        if dev.expect_exit {
            // Exit of a process we already killed on the health path;
            // crash bookkeeping happened when it was declared failed.
            dev.expect_exit = false;
            return;
        }
        match dev.state {
            DeviceState::Online | DeviceState::AttachedStarting => {
                if dev.attached {
                    let _ = ok;
                    self.crash(name, now_ns, actions);
                } else {
                    self.transition(name, DeviceState::Offline, now_ns);
                }
            }
            _ => {}
        }
    }

    /// Crash accounting: restart with exponential backoff while attached,
    /// up to max_attempts within the window; the count resets after a
    /// window without crashes.
    fn crash(&mut self, name: &str, now_ns: u64, actions: &mut Vec<Action>) {
        let window_ns = self.config.backoff_window.as_nanos() as u64;
        let dev = self.devices.get_mut(name).unwrap();
        if dev.last_crash_ns.is_some_and(|t| now_ns.saturating_sub(t) > window_ns) {
            dev.restart_count = 0;
        }
        dev.restart_count += 1;
        dev.last_crash_ns = Some(now_ns);
        if dev.restart_count <= self.config.backoff_max_attempts {
            let delay = self.config.backoff_delay_ns(dev.restart_count);
            dev.backoff_deadline = Some(now_ns + delay);
            let attempt = dev.restart_count;
            self.transition(name, DeviceState::Backoff, now_ns);
            actions.push(Action::Log(format!(
                "{name} crashed; restart attempt {attempt} in {} ms",
                delay / 1_000_000
            )));
        } else {
            dev.backoff_deadline = None;
            dev.failed = true;
            self.transition(name, DeviceState::Offline, now_ns);
            actions.push(Action::Log(format!(
                "{name} exceeded {} restart attempts within {} s; giving up",
                self.config.backoff_max_attempts,
                self.config.backoff_window.as_secs()
            )));
        }
    }

    fn handle_heartbeat(&mut self, name: &str, now_ns: u64, actions: &mut Vec<Action>) {
        let Some(dev) = self.devices.get_mut(name) else {
            return;
        };
        dev.last_heartbeat = Some(now_ns);
        if dev.state == DeviceState::AttachedStarting {
            self.transition(name, DeviceState::Online, now_ns);
            actions.push(Action::Log(format!("{name} online")));
        }
    }

    fn process_deadlines(&mut self, now_ns: u64, actions: &mut Vec<Action>) {
        let hb_budget = self.config.heartbeat_interval.as_nanos() as u64
            * self.config.heartbeat_misses_fatal as u64;
        let names: Vec<String> = self.devices.keys().cloned().collect();
        for name in names {
            let dev = self.devices.get_mut(&name).unwrap();
            match dev.state {
                DeviceState::Offline => {
                    let due = dev.pending_attach
                        && dev.attached
                        && dev.cooldown_until.is_none_or(|t| now_ns >= t);
                    if due {
                        let command = self.registry.by_name(&name).unwrap().on_attach.clone();
                        self.spawn(&name, &command, now_ns, actions);
                    }
                }
                DeviceState::Backoff => {
                    if dev.attached && dev.backoff_deadline.is_some_and(|t| now_ns >= t) {
                        dev.backoff_deadline = None;
                        let command = self.registry.by_name(&name).unwrap().on_attach.clone();
                        self.spawn(&name, &command, now_ns, actions);
                    }
                }
                DeviceState::Detaching => {
                    if dev.grace_deadline.is_some_and(|t| now_ns >= t) {
                        dev.grace_deadline = None;
                        actions.push(Action::SignalKill { name: name.clone() });
                    }
                }
                DeviceState::Online => {
                    if dev.last_heartbeat.is_some_and(|t| now_ns.saturating_sub(t) >= hb_budget) {
                        dev.expect_exit = true;
                        actions.push(Action::SignalKill { name: name.clone() });
                        actions.push(Action::Log(format!(
                            "{name} heartbeat stale; declared failed"
                        )));
                        self.crash(&name, now_ns, actions);
                    }
                }
                DeviceState::AttachedStarting => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::NS_PER_SEC;
    use crate::registry::{load_registry, DeviceIdentity};

    const S: u64 = NS_PER_SEC;

    fn registry() -> Arc<Registry> {
        Arc::new(
            load_registry(
                r#"
[device.tactile_left]
vid = "0x1234"
pid = "0x5678"
serial = "TACL001"
node = "tac_pub"
topic = "/rapid/tactile/left"
on_detach = "tac_cleanup"

[device.cam]
vid = "0x2222"
pid = "0x3333"
node = "cam_pub"
topic = "/rapid/cam"
"#,
            )
            .unwrap(),
        )
    }

    fn attach(serial: Option<&str>, t: u64) -> Input {
        let (vid, pid) = match serial {
            Some(_) => (0x1234, 0x5678),
            None => (0x2222, 0x3333),
        };
        Input::Event(HotplugEvent {
            kind: EventKind::Attach,
            identity: DeviceIdentity::new(vid, pid, serial),
            device_path: None,
            timestamp_ns: t,
        })
    }

    fn detach(serial: Option<&str>, t: u64) -> Input {
        let (vid, pid) = match serial {
            Some(_) => (0x1234, 0x5678),
            None => (0x2222, 0x3333),
        };
        Input::Event(HotplugEvent {
            kind: EventKind::Detach,
            identity: DeviceIdentity::new(vid, pid, serial),
            device_path: None,
            timestamp_ns: t,
        })
    }

    fn has_spawn(actions: &[Action], name: &str) -> bool {
        actions.iter().any(|a| matches!(a, Action::Spawn { name: n, .. } if n == name))
    }

    #[test]
    fn attach_spawns_and_heartbeat_brings_online() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        let actions = core.handle(attach(Some("TACL001"), 0), 0);
        assert!(has_spawn(&actions, "tactile_left"));
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::AttachedStarting));
        assert_eq!(core.presence_word(), (0, 2));

        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 1 }, S);
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Online));
        assert_eq!(core.presence_word(), (0b01, 2));
    }

    #[test]
    fn detach_clears_presence_immediately_and_signals_term() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 1 }, S);
        let actions = core.handle(detach(Some("TACL001"), 2 * S), 2 * S);
        assert!(actions.iter().any(|a| matches!(a, Action::SignalTerm { name } if name == "tactile_left")));
        assert_eq!(core.presence_word(), (0, 2));
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Detaching));
        // Child exits; on_detach hook runs and the device goes Offline.
        let actions = core.handle(
            Input::ChildExited { name: "tactile_left".into(), ok: true },
            2 * S + 100,
        );
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::RunDetachHook { command, .. } if command == "tac_cleanup")));
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Offline));
    }

    #[test]
    fn reattach_during_cooldown_is_deferred_until_expiry() {
        let config = SupervisorConfig::default();
        let mut core = SupervisorCore::new(registry(), config);
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 1 }, S);
        core.handle(detach(Some("TACL001"), 10 * S), 10 * S);
        core.handle(Input::ChildExited { name: "tactile_left".into(), ok: true }, 10 * S + 1);
        // Re-attach 0.5 s after detach: inside the 2 s cooldown.
        let actions = core.handle(attach(Some("TACL001"), 10 * S + S / 2), 10 * S + S / 2);
        assert!(!has_spawn(&actions, "tactile_left"));
        // Nothing happens just before cooldown expiry.
        let actions = core.handle(Input::Tick, 12 * S - 1);
        assert!(!has_spawn(&actions, "tactile_left"));
        // Spawn fires at ≥ detach time + cooldown.
        assert_eq!(core.next_deadline(), Some(12 * S));
        let actions = core.handle(Input::Tick, 12 * S);
        assert!(has_spawn(&actions, "tactile_left"));
    }

    #[test]
    fn grace_escalates_to_kill_at_deadline() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 1 }, S);
        core.handle(detach(Some("TACL001"), 10 * S), 10 * S);
        assert_eq!(core.next_deadline(), Some(15 * S));
        let actions = core.handle(Input::Tick, 15 * S);
        assert!(actions.iter().any(|a| matches!(a, Action::SignalKill { name } if name == "tactile_left")));
    }

    #[test]
    fn crash_loop_backoff_delays_then_permanent_failure() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        let mut now = 0u64;
        core.handle(attach(Some("TACL001"), now), now);
        let mut delays = Vec::new();
        for _ in 0..5 {
            core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, now);
            // Crash immediately after coming online.
            core.handle(Input::ChildExited { name: "tactile_left".into(), ok: false }, now);
            assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Backoff));
            let deadline = core.next_deadline().unwrap();
            delays.push(deadline - now);
            now = deadline;
            let actions = core.handle(Input::Tick, now);
            assert!(has_spawn(&actions, "tactile_left"));
        }
        assert_eq!(delays, vec![S, 2 * S, 4 * S, 8 * S, 16 * S]);
        // Sixth crash exhausts the budget.
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, now);
        core.handle(Input::ChildExited { name: "tactile_left".into(), ok: false }, now);
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Offline));
        assert_eq!(core.presence_word(), (0, 2));
    }

    #[test]
    fn crash_while_detached_does_not_restart() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, 0);
        core.handle(detach(Some("TACL001"), S), S);
        core.handle(Input::ChildExited { name: "tactile_left".into(), ok: false }, S + 1);
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Offline));
        assert_eq!(core.next_deadline(), None);
    }

    #[test]
    fn restart_count_resets_after_quiet_window() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, 0);
        core.handle(Input::ChildExited { name: "tactile_left".into(), ok: false }, 0);
        let d1 = core.next_deadline().unwrap();
        assert_eq!(d1, S);
        core.handle(Input::Tick, d1);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, d1);
        // 61 s of healthy running, then another crash: delay is base again.
        let later = d1 + 61 * S;
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, later);
        core.handle(Input::ChildExited { name: "tactile_left".into(), ok: false }, later);
        assert_eq!(core.next_deadline(), Some(later + S));
    }

    #[test]
    fn frozen_child_declared_failed_after_heartbeat_budget() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, 0);
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Online));
        // Freshness deadline is last heartbeat + 3 × 1 s.
        assert_eq!(core.next_deadline(), Some(3 * S));
        let actions = core.handle(Input::Tick, 3 * S);
        assert!(actions.iter().any(|a| matches!(a, Action::SignalKill { name } if name == "tactile_left")));
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Backoff));
        // The kill-induced exit is not a second crash.
        core.handle(Input::ChildExited { name: "tactile_left".into(), ok: false }, 3 * S + 1);
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Backoff));
        assert_eq!(core.next_deadline(), Some(4 * S));
    }

    #[test]
    fn orphan_detach_logged_and_ignored() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        let actions = core.handle(detach(Some("TACL001"), 0), 0);
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Log(m) if m.contains("orphan detach"))));
        assert_eq!(core.state_of("tactile_left"), Some(DeviceState::Offline));
    }

    #[test]
    fn unmatched_attach_logged_and_ignored() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        let actions = core.handle(
            Input::Event(HotplugEvent {
                kind: EventKind::Attach,
                identity: DeviceIdentity::new(0xdead, 0xbeef, None),
                device_path: None,
                timestamp_ns: 0,
            }),
            0,
        );
        assert!(actions.iter().any(|a| matches!(a, Action::Log(m) if m.contains("unmatched"))));
    }

    #[test]
    fn presence_word_matches_independent_recompute() {
        let mut core = SupervisorCore::new(registry(), SupervisorConfig::default());
        core.handle(attach(Some("TACL001"), 0), 0);
        core.handle(attach(None, 0), 0);
        core.handle(Input::Heartbeat { name: "tactile_left".into(), seq: 0 }, 0);
        core.handle(Input::Heartbeat { name: "cam".into(), seq: 0 }, 0);
        let (word, count) = core.presence_word();
        let expected: u64 = core
            .snapshot()
            .iter()
            .filter(|s| s.state == DeviceState::Online)
            .map(|s| 1u64 << s.bit)
            .sum();
        assert_eq!(word, expected);
        assert_eq!(count, 2);
        assert_eq!(word, 0b11);
    }
}

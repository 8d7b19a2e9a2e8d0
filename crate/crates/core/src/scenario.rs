//! Scenario harness: the four runtime-modality-change conditions run
//! against a mask-aware consumer and a static-config baseline, plus a
//! latency/rate benchmark of the mask path.
//!
//! The "policy" is a deterministic stub: it emits a confident decision
//! when the tactile channel is present and a degraded one otherwise.
//! A run is Degraded when the tactile modality was absent for more than
//! half of all observations, and Crash when the consumer aborted before
//! the timeline completed (only the static baseline can abort).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::daemon::{start_deferred, start_instant, Daemon, DaemonOptions};
use crate::event::{EventKind, HotplugEvent};
use crate::mask::PhysicalMask;
use crate::maskpub::{read_mask, wait_for_mask};
use crate::registry::{load_registry, DeviceIdentity, Registry};
use crate::supervisor::{ProcessSpawner, SupervisorConfig};
use crate::sync::{ChannelSample, ChannelSpec, Synchronizer, DEFAULT_SYNC_WINDOW_NS};
use crate::transport::{subscribe, SubscriberItem};
use crate::vsensor::bytes_to_frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Condition {
    Full,
    NoTactile,
    HotUnplug,
    HotReplug,
}

impl Condition {
    pub const ALL: [Condition; 4] =
        [Condition::Full, Condition::NoTactile, Condition::HotUnplug, Condition::HotReplug];
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "no-tactile" => Ok(Self::NoTactile),
            "hot-unplug" => Ok(Self::HotUnplug),
            "hot-replug" => Ok(Self::HotReplug),
            other => Err(format!("unknown condition `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    MaskAware,
    StaticConfig,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask-aware" => Ok(Self::MaskAware),
            "static-config" => Ok(Self::StaticConfig),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Normal,
    Degraded,
    Crash,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub condition: Condition,
    pub mode: Mode,
    /// Compression knob for tests; the real-time proportions of the
    /// timeline are fixed per condition.
    pub duration: Duration,
}

impl ScenarioSpec {
    pub fn new(condition: Condition, mode: Mode) -> Self {
        let duration = match condition {
            Condition::Full | Condition::NoTactile => Duration::from_secs(6),
            Condition::HotUnplug => Duration::from_secs(8),
            Condition::HotReplug => Duration::from_secs(12),
        };
        Self { condition, mode, duration }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PresenceTransition {
    pub t_ref: u64,
    pub channel: String,
    pub present: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub condition: Condition,
    pub mode: Mode,
    pub status: Status,
    pub observations_emitted: usize,
    pub confident_decisions: usize,
    pub degraded_decisions: usize,
    pub zero_filled_fraction: BTreeMap<String, f64>,
    pub transition_log: Vec<PresenceTransition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("daemon unreachable: {0}")]
    DaemonUnreachable(String),
    #[error("sensor binary missing: {0}")]
    SensorBinary(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where to find the sensor binary and where to put run state.
pub struct HarnessConfig {
    pub vsensor_bin: PathBuf,
    pub work_dir: PathBuf,
}

const CAM_IDENTITY: (u16, u16, &str) = (0x0fd9, 0x0066, "CAMW001");
const TAC_IDENTITY: (u16, u16, &str) = (0x1234, 0x5678, "TACL001");
const SHAPE: [usize; 2] = [4, 4];

fn identity(t: (u16, u16, &str)) -> DeviceIdentity {
    DeviceIdentity { vid: t.0, pid: t.1, serial: Some(t.2.to_owned()) }
}

fn pick_free_port() -> std::io::Result<u16> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    Ok(listener.local_addr()?.port())
}

fn scenario_registry(bin: &Path, cam_port: u16, tac_port: u16) -> Registry {
    let bin = bin.display();
    let toml = format!(
        r#"
[device.cam_wrist]
vid = "0x{cv:04x}"
pid = "0x{cp:04x}"
serial = "{cs}"
node = "{bin} --name cam_wrist --topic /rapid/cam --rate 30 --kind camera --shape 4x4 --seed 7 --listen 127.0.0.1:{cam_port}"
topic = "/rapid/cam"
shape = [4, 4]

[device.tac_left]
vid = "0x{tv:04x}"
pid = "0x{tp:04x}"
serial = "{ts}"
node = "{bin} --name tac_left --topic /rapid/tac --rate 30 --kind tactile --shape 4x4 --seed 8 --listen 127.0.0.1:{tac_port}"
topic = "/rapid/tac"
shape = [4, 4]
"#,
        cv = CAM_IDENTITY.0,
        cp = CAM_IDENTITY.1,
        cs = CAM_IDENTITY.2,
        tv = TAC_IDENTITY.0,
        tp = TAC_IDENTITY.1,
        ts = TAC_IDENTITY.2,
    );
    load_registry(&toml).expect("scenario registry is well-formed")
}

fn timeline(condition: Condition, duration: Duration) -> Vec<(Duration, EventKind, DeviceIdentity)> {
    let start = Duration::from_millis(100);
    let cam = identity(CAM_IDENTITY);
    let tac = identity(TAC_IDENTITY);
    let unplug = duration.mul_f64(0.30);
    match condition {
        Condition::Full => vec![
            (start, EventKind::Attach, cam),
            (start, EventKind::Attach, tac),
        ],
        Condition::NoTactile => vec![(start, EventKind::Attach, cam)],
        Condition::HotUnplug => vec![
            (start, EventKind::Attach, cam),
            (start, EventKind::Attach, tac.clone()),
            (unplug, EventKind::Detach, tac),
        ],
        Condition::HotReplug => vec![
            (start, EventKind::Attach, cam),
            (start, EventKind::Attach, tac.clone()),
            (unplug, EventKind::Detach, tac.clone()),
            // Re-attach shortly after; the supervisor's cooldown defers
            // the actual respawn.
            (unplug + Duration::from_millis(600), EventKind::Attach, tac),
        ],
    }
}

struct SubscriberFeed {
    rx: Receiver<(usize, ChannelSample)>,
    stop: Arc<AtomicBool>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

/// One retrying subscriber thread per channel: sensors come and go with
/// hot-plug events, so connect failures and disconnects restart the
/// subscription.
fn spawn_subscribers(endpoints: Vec<(usize, String, String)>) -> SubscriberFeed {
    let (tx, rx) = channel();
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    for (idx, addr, topic) in endpoints {
        let tx = tx.clone();
        let stop = stop.clone();
        threads.push(std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                let sub = match subscribe(&addr, &[&topic]) {
                    Ok(s) => s,
                    Err(_) => {
                        std::thread::sleep(Duration::from_millis(50));
                        continue;
                    }
                };
                loop {
                    if stop.load(Ordering::Relaxed) {
                        return;
                    }
                    match sub.recv_timeout(Duration::from_millis(100)) {
                        Some(SubscriberItem::Frame(env)) => {
                            let sample = ChannelSample {
                                t_ns: env.timestamp_ns,
                                values: bytes_to_frame(&env.payload),
                            };
                            if tx.send((idx, sample)).is_err() {
                                return;
                            }
                        }
                        Some(SubscriberItem::Disconnected) => break,
                        None => continue,
                    }
                }
            }
        }));
    }
    SubscriberFeed { rx, stop, threads }
}

impl SubscriberFeed {
    fn stop(self) {
        self.stop.store(true, Ordering::Relaxed);
        drop(self.rx);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

pub fn run_scenario(
    spec: &ScenarioSpec,
    harness: &HarnessConfig,
) -> Result<ScenarioOutcome, HarnessError> {
    if !harness.vsensor_bin.exists() {
        return Err(HarnessError::SensorBinary(harness.vsensor_bin.display().to_string()));
    }
    let dir = harness.work_dir.join(format!("{:?}-{:?}", spec.condition, spec.mode));
    std::fs::create_dir_all(&dir)?;

    let cam_port = pick_free_port()?;
    let tac_port = pick_free_port()?;
    let registry = scenario_registry(&harness.vsensor_bin, cam_port, tac_port);
    let mut options = DaemonOptions::new(registry, &dir);
    options.transport_listen = None;
    let hb_socket = options.heartbeat_socket.display().to_string();
    let daemon = start_deferred(options, move |sender| {
        Box::new(
            ProcessSpawner::new(vec![("RAPID_HEARTBEAT_SOCKET".into(), hb_socket)])
                .with_notify(sender),
        )
    })
    .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;
    wait_for_mask(daemon.mask_path(), Duration::from_secs(2))
        .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;

    let specs = vec![
        ChannelSpec {
            name: "cam".into(),
            topic: "/rapid/cam".into(),
            shape: SHAPE.to_vec(),
            bit: 0,
            nominal_rate_hz: 30.0,
        },
        ChannelSpec {
            name: "tac".into(),
            topic: "/rapid/tac".into(),
            shape: SHAPE.to_vec(),
            bit: 1,
            nominal_rate_hz: 30.0,
        },
    ];
    let feed = spawn_subscribers(vec![
        (0, format!("127.0.0.1:{cam_port}"), "/rapid/cam".into()),
        (1, format!("127.0.0.1:{tac_port}"), "/rapid/tac".into()),
    ]);
    let mut sync = Synchronizer::new(specs.clone(), DEFAULT_SYNC_WINDOW_NS);

    let mut events = timeline(spec.condition, spec.duration);
    events.sort_by_key(|(at, _, _)| *at);
    let mut next_event = 0usize;

    let start = Instant::now();
    let mut observations = 0usize;
    let mut confident = 0usize;
    let mut degraded = 0usize;
    let mut absent_counts = vec![0usize; specs.len()];
    let mut last_present: Vec<Option<bool>> = vec![None; specs.len()];
    let mut transition_log = Vec::new();
    // Static baseline: a channel becomes "expected" once it has delivered
    // while present; losing an expected channel afterwards is fatal.
    let mut was_present = vec![false; specs.len()];
    let mut abort_reason = None;
    let mut last_emit = Instant::now();

    'run: while start.elapsed() < spec.duration {
        while next_event < events.len() && start.elapsed() >= events[next_event].0 {
            let (_, kind, ident) = events[next_event].clone();
            let _ = daemon.events().inject(HotplugEvent {
                kind,
                identity: ident,
                device_path: None,
                timestamp_ns: monotonic_ns(),
            });
            next_event += 1;
        }

        // Ingest samples and a fresh mask reading.
        loop {
            match feed.rx.recv_timeout(Duration::from_millis(2)) {
                Ok((idx, sample)) => sync.push_sample(idx, sample),
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        if let Ok(m) = read_mask(daemon.mask_path()) {
            // Re-stamp onto the machine-wide clock the samples use.
            sync.push_mask(PhysicalMask::new(m.device_count, m.mask, monotonic_ns(), m.sequence));
        }

        loop {
            // Force after a quiet spell so presence flips cannot stall
            // the stream longer than a couple of alignment periods.
            let force = last_emit.elapsed() > Duration::from_millis(100);
            let Some(obs) = sync.try_emit(force) else { break };
            last_emit = Instant::now();
            observations += 1;
            for (c, ch) in obs.channels.iter().enumerate() {
                if !ch.present {
                    absent_counts[c] += 1;
                }
                if last_present[c] != Some(ch.present) {
                    last_present[c] = Some(ch.present);
                    transition_log.push(PresenceTransition {
                        t_ref: obs.t_ref,
                        channel: specs[c].name.clone(),
                        present: ch.present,
                    });
                }
            }
            let tactile_present = obs.channels[1].present && !obs.channels[1].stale;
            if tactile_present {
                confident += 1;
            } else {
                degraded += 1;
            }
            if spec.mode == Mode::StaticConfig {
                for (c, ch) in obs.channels.iter().enumerate() {
                    let delivered = ch.present && !ch.stale;
                    if delivered {
                        was_present[c] = true;
                    }
                    if was_present[c] && !ch.present {
                        abort_reason = Some(format!(
                            "expected stream `{}` lost at t_ref {}",
                            specs[c].name, obs.t_ref
                        ));
                        break 'run;
                    }
                }
            }
        }
        std::thread::sleep(Duration::from_millis(2));
    }

    feed.stop();
    daemon.stop();

    let status = if abort_reason.is_some() {
        Status::Crash
    } else {
        let absent_fraction = if observations == 0 {
            1.0
        } else {
            absent_counts[1] as f64 / observations as f64
        };
        if absent_fraction > 0.5 {
            Status::Degraded
        } else {
            Status::Normal
        }
    };

    let mut zero_filled_fraction = BTreeMap::new();
    for (c, spec_c) in specs.iter().enumerate() {
        let f = if observations == 0 {
            0.0
        } else {
            absent_counts[c] as f64 / observations as f64
        };
        zero_filled_fraction.insert(spec_c.name.clone(), f);
    }

    Ok(ScenarioOutcome {
        condition: spec.condition,
        mode: spec.mode,
        status,
        observations_emitted: observations,
        confident_decisions: confident,
        degraded_decisions: degraded,
        zero_filled_fraction,
        transition_log,
        abort_reason,
    })
}

/// Expected Status per (condition, mode) cell.
pub fn expected_status(condition: Condition, mode: Mode) -> Status {
    match (condition, mode) {
        (Condition::Full, _) => Status::Normal,
        (Condition::NoTactile, _) => Status::Degraded,
        (Condition::HotUnplug, Mode::MaskAware) => Status::Degraded,
        (Condition::HotReplug, Mode::MaskAware) => Status::Normal,
        (Condition::HotUnplug | Condition::HotReplug, Mode::StaticConfig) => Status::Crash,
    }
}

// ---------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    fn from_ns(mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        // Nearest-rank percentile.
        let pick = |q: f64| {
            if samples.is_empty() {
                return 0.0;
            }
            let rank = (q * samples.len() as f64).ceil() as usize;
            samples[rank.clamp(1, samples.len()) - 1] as f64 / 1000.0
        };
        Self { p50_us: pick(0.50), p99_us: pick(0.99), max_us: pick(1.0) }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub transitions: usize,
    pub inject_to_bit_set: LatencyStats,
    pub inject_to_bit_clear: LatencyStats,
    pub publish_rate_hz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attach_to_first_data_ms: Option<f64>,
}

impl BenchReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str("mask path benchmark\n");
        out.push_str(&format!("  transitions measured      {}\n", self.transitions));
        out.push_str(&format!(
            "  inject -> bit set         p50 {:.1} us   p99 {:.1} us   max {:.1} us\n",
            self.inject_to_bit_set.p50_us,
            self.inject_to_bit_set.p99_us,
            self.inject_to_bit_set.max_us
        ));
        out.push_str(&format!(
            "  inject -> bit clear       p50 {:.1} us   p99 {:.1} us   max {:.1} us\n",
            self.inject_to_bit_clear.p50_us,
            self.inject_to_bit_clear.p99_us,
            self.inject_to_bit_clear.max_us
        ));
        out.push_str(&format!("  mask publish rate         {:.1} Hz\n", self.publish_rate_hz));
        if let Some(ms) = self.attach_to_first_data_ms {
            out.push_str(&format!("  attach -> first data      {ms:.1} ms\n"));
        }
        out
    }
}

const BENCH_REGISTRY: &str = r#"
[device.tac_left]
vid = "0x1234"
pid = "0x5678"
serial = "TACL001"
node = "unused"
topic = "/rapid/tac"
"#;

/// Measures injection-to-bit-visible latency over `transitions`
/// attach/detach pairs against a daemon whose children come online
/// instantly, plus the live publish rate. Cooldown is zeroed: the
/// subject is the mask path, not lifecycle policy.
pub fn bench_mask_path(
    work_dir: &Path,
    transitions: usize,
    vsensor_bin: Option<&Path>,
) -> Result<BenchReport, HarnessError> {
    std::fs::create_dir_all(work_dir)?;
    let registry = load_registry(BENCH_REGISTRY).expect("bench registry");
    let mut options = DaemonOptions::new(registry, work_dir);
    options.transport_listen = None;
    options.supervisor_config = SupervisorConfig {
        cooldown: Duration::ZERO,
        ..SupervisorConfig::default()
    };
    let daemon = start_instant(options);
    wait_for_mask(daemon.mask_path(), Duration::from_secs(2))
        .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;

    let ident = identity(TAC_IDENTITY);
    let mut set_lat = Vec::with_capacity(transitions);
    let mut clear_lat = Vec::with_capacity(transitions);
    for _ in 0..transitions {
        set_lat.push(measure_flip(&daemon, &ident, EventKind::Attach, true)?);
        clear_lat.push(measure_flip(&daemon, &ident, EventKind::Detach, false)?);
    }

    // Publish rate over a 2 s window from the sequence counter.
    let s0 = read_mask(daemon.mask_path())
        .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;
    let window = Duration::from_secs(2);
    std::thread::sleep(window);
    let s1 = read_mask(daemon.mask_path())
        .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;
    let publish_rate_hz = (s1.sequence - s0.sequence) as f64 / window.as_secs_f64();
    daemon.stop();

    let attach_to_first_data_ms = match vsensor_bin {
        Some(bin) => Some(measure_attach_to_first_data(work_dir, bin)?),
        None => None,
    };

    Ok(BenchReport {
        transitions,
        inject_to_bit_set: LatencyStats::from_ns(set_lat),
        inject_to_bit_clear: LatencyStats::from_ns(clear_lat),
        publish_rate_hz,
        attach_to_first_data_ms,
    })
}

fn measure_flip(
    daemon: &Daemon,
    ident: &DeviceIdentity,
    kind: EventKind,
    want_set: bool,
) -> Result<u64, HarnessError> {
    let t0 = Instant::now();
    daemon
        .events()
        .inject(HotplugEvent {
            kind,
            identity: ident.clone(),
            device_path: None,
            timestamp_ns: monotonic_ns(),
        })
        .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;
    let deadline = t0 + Duration::from_secs(2);
    loop {
        let m = read_mask(daemon.mask_path())
            .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;
        if (m.mask & 1 == 1) == want_set {
            return Ok(t0.elapsed().as_nanos() as u64);
        }
        if Instant::now() > deadline {
            return Err(HarnessError::DaemonUnreachable(format!(
                "bit never reached {want_set} after {kind:?}"
            )));
        }
        std::hint::spin_loop();
    }
}

fn measure_attach_to_first_data(work_dir: &Path, bin: &Path) -> Result<f64, HarnessError> {
    if !bin.exists() {
        return Err(HarnessError::SensorBinary(bin.display().to_string()));
    }
    let dir = work_dir.join("first-data");
    std::fs::create_dir_all(&dir)?;
    let port = pick_free_port()?;
    let registry = scenario_registry(bin, port, pick_free_port()?);
    let mut options = DaemonOptions::new(registry, &dir);
    options.transport_listen = None;
    let hb_socket = options.heartbeat_socket.display().to_string();
    let daemon = start_deferred(options, move |sender| {
        Box::new(
            ProcessSpawner::new(vec![("RAPID_HEARTBEAT_SOCKET".into(), hb_socket)])
                .with_notify(sender),
        )
    })
    .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;

    let feed = spawn_subscribers(vec![(0, format!("127.0.0.1:{port}"), "/rapid/cam".into())]);
    let t0 = Instant::now();
    daemon
        .events()
        .inject(HotplugEvent {
            kind: EventKind::Attach,
            identity: identity(CAM_IDENTITY),
            device_path: None,
            timestamp_ns: monotonic_ns(),
        })
        .map_err(|e| HarnessError::DaemonUnreachable(e.to_string()))?;
    let got = feed.rx.recv_timeout(Duration::from_secs(5));
    let elapsed_ms = t0.elapsed().as_secs_f64() * 1000.0;
    feed.stop();
    daemon.stop();
    match got {
        Ok(_) => Ok(elapsed_ms),
        Err(_) => Err(HarnessError::DaemonUnreachable("no data after attach".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_status_matrix_shape() {
        use Condition::*;
        use Mode::*;
        assert_eq!(expected_status(Full, MaskAware), Status::Normal);
        assert_eq!(expected_status(NoTactile, MaskAware), Status::Degraded);
        assert_eq!(expected_status(HotUnplug, MaskAware), Status::Degraded);
        assert_eq!(expected_status(HotReplug, MaskAware), Status::Normal);
        assert_eq!(expected_status(Full, StaticConfig), Status::Normal);
        assert_eq!(expected_status(NoTactile, StaticConfig), Status::Degraded);
        assert_eq!(expected_status(HotUnplug, StaticConfig), Status::Crash);
        assert_eq!(expected_status(HotReplug, StaticConfig), Status::Crash);
    }

    #[test]
    fn timeline_contains_mid_run_events() {
        let d = Duration::from_secs(10);
        let unplug = timeline(Condition::HotUnplug, d);
        assert!(unplug.iter().any(|(_, k, _)| *k == EventKind::Detach));
        let replug = timeline(Condition::HotReplug, d);
        let detach_at =
            replug.iter().find(|(_, k, _)| *k == EventKind::Detach).map(|(t, _, _)| *t).unwrap();
        let reattach_at = replug
            .iter()
            .filter(|(_, k, _)| *k == EventKind::Attach)
            .map(|(t, _, _)| *t)
            .max()
            .unwrap();
        assert!(reattach_at > detach_at);
    }

    #[test]
    fn latency_stats_percentiles() {
        let stats = LatencyStats::from_ns((1..=100u64).map(|n| n * 1000).collect());
        assert_eq!(stats.p50_us, 50.0);
        assert_eq!(stats.p99_us, 99.0);
        assert_eq!(stats.max_us, 100.0);
    }
}

//! Virtual sensor publishers: synthetic wrist-camera, visuotactile, and
//! motor-state processes that stand in for real hardware in every test.
//! Frames are deterministic — `(seed, config, n)` fully determine the
//! payload bytes of frame `n` — and each process heartbeats at 1 Hz and
//! obeys graceful termination unless a misbehavior mode says otherwise.

use std::os::unix::net::UnixDatagram;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::transport::Publisher;

/// Tactile frames carry a synthetic contact event on every frame where
/// `n % CONTACT_PERIOD == CONTACT_PHASE` (n > 0); the contact region is
/// the first quarter of the flattened taxel array, raised by
/// `CONTACT_DELTA` over the resting value.
pub const CONTACT_PERIOD: u64 = 8;
pub const CONTACT_PHASE: u64 = 4;
pub const CONTACT_DELTA: f32 = 0.25;
pub const TACTILE_REST: f32 = 0.5;

/// Frames published before a `Freeze` sensor stops responding.
pub const FREEZE_AFTER_FRAMES: u64 = 10;

pub const HEARTBEAT_PERIOD: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Camera,
    Tactile,
    Motor,
}

impl FromStr for PayloadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "camera" => Ok(Self::Camera),
            "tactile" => Ok(Self::Tactile),
            "motor" => Ok(Self::Motor),
            other => Err(format!("unknown payload kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Misbehavior {
    None,
    IgnoreTermination,
    CrashAfter(u64),
    Freeze,
}

impl FromStr for Misbehavior {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            Ok(Self::None)
        } else if s == "ignore-termination" {
            Ok(Self::IgnoreTermination)
        } else if s == "freeze" {
            Ok(Self::Freeze)
        } else if let Some(n) = s.strip_prefix("crash-after:") {
            n.parse::<u64>()
                .map(Self::CrashAfter)
                .map_err(|e| format!("bad crash-after count: {e}"))
        } else {
            Err(format!("unknown misbehavior `{s}`"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct VirtualSensorConfig {
    pub name: String,
    pub topic: String,
    pub rate_hz: f64,
    pub payload_kind: PayloadKind,
    pub shape: Vec<usize>,
    pub misbehavior: Misbehavior,
    pub seed: u64,
}

impl VirtualSensorConfig {
    pub fn flat_len(&self) -> usize {
        self.shape.iter().product::<usize>().max(1)
    }

    pub fn validate(&self) -> Result<(), VsError> {
        if !(self.rate_hz > 0.0 && self.rate_hz <= 120.0) {
            return Err(VsError::BadConfig(format!(
                "rate_hz {} outside (0, 120]",
                self.rate_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum VsError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("connect failure: {0}")]
    ConnectFailure(String),
}

/// Deterministic frame synthesis. Values are f32, serialized little-endian.
pub fn generate_frame(config: &VirtualSensorConfig, n: u64) -> Vec<f32> {
    let len = config.flat_len();
    match config.payload_kind {
        PayloadKind::Camera => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(config.seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
        }
        PayloadKind::Tactile => {
            let mut values = vec![TACTILE_REST; len];
            if n > 0 && n % CONTACT_PERIOD == CONTACT_PHASE {
                for v in values.iter_mut().take(contact_region_len(len)) {
                    *v += CONTACT_DELTA;
                }
            }
            values
        }
        PayloadKind::Motor => (0..len)
            .map(|i| {
                let phase = n as f64 / 50.0 * std::f64::consts::TAU + i as f64;
                phase.sin() as f32
            })
            .collect(),
    }
}

pub fn contact_region_len(flat_len: usize) -> usize {
    (flat_len / 4).max(1)
}

pub fn frame_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_frame(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

static TERM_REQUESTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_term(_sig: libc::c_int) {
    TERM_REQUESTED.store(true, Ordering::SeqCst);
}

/// Installs a SIGTERM/SIGINT handler that only sets a flag, so the run
/// loop decides whether to honor it (IgnoreTermination does not).
pub fn install_term_handler() {
    unsafe {
        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = on_term as extern "C" fn(libc::c_int) as usize;
        libc::sigaction(libc::SIGTERM, &action, std::ptr::null_mut());
        libc::sigaction(libc::SIGINT, &action, std::ptr::null_mut());
    }
}

pub fn term_requested() -> bool {
    TERM_REQUESTED.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    Terminated,
    Crashed,
    FrameLimit,
}

/// Runtime wiring for a sensor process: where to publish and where to
/// send heartbeats.
pub struct SensorContext {
    pub listen_addr: String,
    pub heartbeat_socket: Option<String>,
    /// Stop after this many frames (None = run until terminated). Used
    /// by in-process tests; real processes run unbounded.
    pub max_frames: Option<u64>,
}

struct HeartbeatSender {
    sock: UnixDatagram,
    target: String,
    name: String,
    seq: u64,
}

impl HeartbeatSender {
    fn new(target: &str, name: &str) -> Option<Self> {
        let sock = UnixDatagram::unbound().ok()?;
        Some(Self { sock, target: target.to_owned(), name: name.to_owned(), seq: 0 })
    }

    fn beat(&mut self) {
        self.seq += 1;
        let line = format!("HB {} {}\n", self.name, self.seq);
        // Best-effort: the daemon may not be up yet.
        let _ = self.sock.send_to(line.as_bytes(), &self.target);
    }
}

/// Publishes deterministic frames at `rate_hz`, heartbeats at 1 Hz, and
/// honors graceful termination per the configured misbehavior. Returns
/// only when the process should exit; the caller maps the reason to an
/// exit code.
pub fn run_virtual_sensor(
    config: &VirtualSensorConfig,
    ctx: &SensorContext,
) -> Result<(ExitReason, Publisher), VsError> {
    config.validate()?;
    let publisher =
        Publisher::bind(&ctx.listen_addr).map_err(|e| VsError::ConnectFailure(e.to_string()))?;
    let mut hb = ctx
        .heartbeat_socket
        .as_deref()
        .and_then(|t| HeartbeatSender::new(t, &config.name));

    let period = Duration::from_secs_f64(1.0 / config.rate_hz);
    let start = Instant::now();
    let mut next_frame = start;
    let mut next_hb = start;
    let mut n: u64 = 0;

    loop {
        if term_requested() && config.misbehavior != Misbehavior::IgnoreTermination {
            return Ok((ExitReason::Terminated, publisher));
        }
        if let Some(limit) = ctx.max_frames {
            if n >= limit {
                return Ok((ExitReason::FrameLimit, publisher));
            }
        }
        let now = Instant::now();
        if now >= next_hb {
            if let Some(hb) = hb.as_mut() {
                hb.beat();
            }
            next_hb += HEARTBEAT_PERIOD;
        }
        if now >= next_frame {
            if let Misbehavior::CrashAfter(limit) = config.misbehavior {
                if n >= limit {
                    return Ok((ExitReason::Crashed, publisher));
                }
            }
            if config.misbehavior == Misbehavior::Freeze && n >= FREEZE_AFTER_FRAMES {
                // Frozen: alive but silent — no frames, no heartbeats.
                // The supervisor's heartbeat staleness path must reclaim us.
                loop {
                    std::thread::sleep(Duration::from_millis(100));
                    if term_requested() && config.misbehavior != Misbehavior::IgnoreTermination {
                        return Ok((ExitReason::Terminated, publisher));
                    }
                }
            }
            let t_ns = crate::clock::monotonic_ns();
            let payload = frame_to_bytes(&generate_frame(config, n));
            let _ = publisher.publish(&config.topic, t_ns, &payload);
            n += 1;
            next_frame += period;
            // Catch up without bursting if we fell behind.
            if next_frame + period < Instant::now() {
                next_frame = Instant::now();
            }
        }
        let wake = next_frame.min(next_hb);
        let now = Instant::now();
        if wake > now {
            std::thread::sleep((wake - now).min(Duration::from_millis(20)));
        }
    }
}

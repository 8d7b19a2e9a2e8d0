//! Shared-file mask publisher: one writer thread rewrites the 32-byte
//! record every 2 ms; readers re-read until two consecutive snapshots
//! carry the same sequence to rule out torn reads.

use std::fs::{File, OpenOptions};
use std::io::Read;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::mask::{decode_mask, encode_mask, MaskError, PhysicalMask, MASK_RECORD_SIZE};
use crate::registry::Registry;

pub const DEFAULT_MASK_FILENAME: &str = "rapid_hardware_mask";

#[derive(Debug, Clone)]
pub struct MaskChannel {
    pub path: PathBuf,
    pub debug_path: PathBuf,
    pub publish_interval: Duration,
    pub debug_interval: Duration,
}

impl MaskChannel {
    pub fn at(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let mut debug_path = path.clone().into_os_string();
        debug_path.push(".json");
        Self {
            path,
            debug_path: debug_path.into(),
            publish_interval: Duration::from_millis(2),
            debug_interval: Duration::from_secs(1),
        }
    }

    /// Default location under the platform shared-memory directory,
    /// overridable via RAPID_MASK_PATH.
    pub fn default_path() -> PathBuf {
        if let Ok(p) = std::env::var("RAPID_MASK_PATH") {
            return PathBuf::from(p);
        }
        let shm = Path::new("/dev/shm");
        let dir = if shm.is_dir() { shm.to_path_buf() } else { std::env::temp_dir() };
        dir.join(DEFAULT_MASK_FILENAME)
    }
}

impl Default for MaskChannel {
    fn default() -> Self {
        Self::at(Self::default_path())
    }
}

#[derive(Debug, Error)]
pub enum MaskReadError {
    #[error("mask file unavailable: {0}")]
    Unavailable(String),
    #[error("torn read: sequence never stabilized")]
    TornRead,
    #[error(transparent)]
    Decode(#[from] MaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Consistent snapshot of the shared record: re-reads until two
/// consecutive reads carry the same sequence (bounded retries).
pub fn read_mask(path: impl AsRef<Path>) -> Result<PhysicalMask, MaskReadError> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| MaskReadError::Unavailable(format!("{}: {e}", path.display())))?;
    let mut prev: Option<[u8; MASK_RECORD_SIZE]> = None;
    for _ in 0..1000 {
        let mut buf = [0u8; MASK_RECORD_SIZE];
        file.read_exact_at(&mut buf, 0)?;
        if prev == Some(buf) {
            return Ok(decode_mask(&buf)?);
        }
        // Same sequence on two consecutive reads is enough even if the
        // byte images differ in timestamp only when re-written mid-read;
        // full-buffer equality is the stricter check and still converges
        // because reads are far faster than the 2 ms publish tick.
        prev = Some(buf);
        std::hint::spin_loop();
    }
    // Fall back to sequence-stability: two reads with equal sequence.
    let mut last_seq = None;
    for _ in 0..1000 {
        let mut buf = [0u8; MASK_RECORD_SIZE];
        file.read_exact_at(&mut buf, 0)?;
        if let Ok(m) = decode_mask(&buf) {
            if last_seq == Some(m.sequence) {
                return Ok(m);
            }
            last_seq = Some(m.sequence);
        } else {
            last_seq = None;
        }
    }
    Err(MaskReadError::TornRead)
}

/// Handle used to stop a running publish loop.
#[derive(Clone, Default)]
pub struct Shutdown {
    flag: Arc<AtomicBool>,
}

impl Shutdown {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&self) {
        self.flag.store(true, Ordering::SeqCst);
    }

    pub fn requested(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }
}

/// Runs until shutdown: every tick reads the presence state, stamps
/// timestamp and sequence, and rewrites the whole record with a single
/// positioned write. Debug JSON is rewritten via temp-file-then-rename
/// when a registry is supplied.
pub fn publish_loop(
    channel: &MaskChannel,
    mut state_source: impl FnMut() -> (u64, u8),
    registry: Option<&Registry>,
    shutdown: &Shutdown,
) -> Result<(), MaskReadError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(&channel.path)
        .map_err(|e| MaskReadError::Unavailable(format!("{}: {e}", channel.path.display())))?;
    file.set_len(MASK_RECORD_SIZE as u64)?;

    let start = Instant::now();
    let mut sequence: u64 = 0;
    let mut next_tick = Instant::now();
    let mut next_debug = Instant::now();

    while !shutdown.requested() {
        let (mask, device_count) = state_source();
        sequence += 1;
        let m = PhysicalMask::new(device_count, mask, start.elapsed().as_nanos() as u64, sequence);
        match encode_mask(&m) {
            Ok(bytes) => {
                if let Err(e) = file.write_all_at(&bytes, 0) {
                    log::error!("mask write failed: {e}");
                }
            }
            Err(e) => log::error!("mask state invalid, skipping publish: {e}"),
        }

        if let Some(reg) = registry {
            if Instant::now() >= next_debug {
                write_debug_json(channel, &m, reg);
                next_debug += channel.debug_interval;
            }
        }

        next_tick += channel.publish_interval;
        let now = Instant::now();
        if next_tick > now {
            std::thread::sleep(next_tick - now);
        } else {
            // Fell behind; skip missed ticks rather than bursting.
            next_tick = now;
        }
    }
    Ok(())
}

fn write_debug_json(channel: &MaskChannel, m: &PhysicalMask, registry: &Registry) {
    let json = match crate::mask::render_debug(m, registry, &crate::mask::iso8601_utc_now()) {
        Ok(j) => j,
        Err(e) => {
            log::warn!("debug view unavailable: {e}");
            return;
        }
    };
    let tmp = channel.debug_path.with_extension("json.tmp");
    if std::fs::write(&tmp, json).and_then(|_| std::fs::rename(&tmp, &channel.debug_path)).is_err()
    {
        log::warn!("debug json write failed at {}", channel.debug_path.display());
    }
}

/// Convenience wrapper: spawns the publish loop on its own thread.
pub fn spawn_publisher(
    channel: MaskChannel,
    state_source: impl FnMut() -> (u64, u8) + Send + 'static,
    registry: Option<Registry>,
    shutdown: Shutdown,
) -> std::thread::JoinHandle<Result<(), MaskReadError>> {
    std::thread::Builder::new()
        .name("maskpub".into())
        .spawn(move || publish_loop(&channel, state_source, registry.as_ref(), &shutdown))
        .expect("spawn maskpub thread")
}

/// Blocks until the mask file exists and decodes, or the timeout expires.
pub fn wait_for_mask(path: impl AsRef<Path>, timeout: Duration) -> Result<PhysicalMask, MaskReadError> {
    let deadline = Instant::now() + timeout;
    loop {
        match read_mask(path.as_ref()) {
            Ok(m) => return Ok(m),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => std::thread::sleep(Duration::from_millis(2)),
        }
    }
}

/// Reads the full record bytes once, without the stability protocol.
/// Test harnesses use this to hunt for torn images.
pub fn read_raw(path: impl AsRef<Path>) -> std::io::Result<[u8; MASK_RECORD_SIZE]> {
    let mut buf = [0u8; MASK_RECORD_SIZE];
    let mut f = File::open(path)?;
    f.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU64;

    #[test]
    fn read_missing_file_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_mask(dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, MaskReadError::Unavailable(_)));
    }

    #[test]
    fn publish_then_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let channel = MaskChannel::at(dir.path().join("mask"));
        let shutdown = Shutdown::new();
        let handle = spawn_publisher(channel.clone(), || (0x05, 3), None, shutdown.clone());
        let m = wait_for_mask(&channel.path, Duration::from_secs(2)).unwrap();
        assert_eq!(m.mask, 0x05);
        assert_eq!(m.device_count, 3);
        shutdown.request();
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn shutdown_stops_loop_promptly() {
        let dir = tempfile::tempdir().unwrap();
        let channel = MaskChannel::at(dir.path().join("mask"));
        let shutdown = Shutdown::new();
        let handle = spawn_publisher(channel, || (0, 0), None, shutdown.clone());
        std::thread::sleep(Duration::from_millis(20));
        shutdown.request();
        let t0 = Instant::now();
        handle.join().unwrap().unwrap();
        assert!(t0.elapsed() < Duration::from_millis(100));
    }

    #[test]
    fn sequence_increases_and_state_change_visible() {
        let dir = tempfile::tempdir().unwrap();
        let channel = MaskChannel::at(dir.path().join("mask"));
        let shutdown = Shutdown::new();
        let word = Arc::new(AtomicU64::new(0x01));
        let w = word.clone();
        let handle = spawn_publisher(
            channel.clone(),
            move || (w.load(Ordering::SeqCst), 2),
            None,
            shutdown.clone(),
        );
        let first = wait_for_mask(&channel.path, Duration::from_secs(2)).unwrap();
        word.store(0x03, Ordering::SeqCst);
        let deadline = Instant::now() + Duration::from_secs(1);
        let mut last = first;
        while last.mask != 0x03 && Instant::now() < deadline {
            last = read_mask(&channel.path).unwrap();
        }
        assert_eq!(last.mask, 0x03);
        assert!(last.sequence > first.sequence);
        shutdown.request();
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn debug_json_written_and_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mut channel = MaskChannel::at(dir.path().join("mask"));
        channel.debug_interval = Duration::from_millis(20);
        let registry = crate::registry::load_registry(
            "[device.a]\nvid=\"1\"\npid=\"2\"\nnode=\"n\"\ntopic=\"/a\"\n",
        )
        .unwrap();
        let shutdown = Shutdown::new();
        let handle =
            spawn_publisher(channel.clone(), || (0x01, 1), Some(registry), shutdown.clone());
        let deadline = Instant::now() + Duration::from_secs(2);
        let mut parsed = None;
        while parsed.is_none() && Instant::now() < deadline {
            if let Ok(text) = std::fs::read_to_string(&channel.debug_path) {
                parsed = serde_json::from_str::<crate::mask::MaskDebugView>(&text).ok();
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        shutdown.request();
        handle.join().unwrap().unwrap();
        let view = parsed.expect("debug json appears and parses");
        assert_eq!(view.mask, "0x01");
        assert_eq!(view.devices[0].name, "a");
    }
}

//! The physical mask value and its bit-exact binary and JSON debug
//! encodings.
//!
//! Binary layout (32 bytes, little-endian):
//!
//! | offset | size | field        |
//! |--------|------|--------------|
//! | 0      | 4    | magic        |
//! | 4      | 1    | version      |
//! | 5      | 1    | device_count |
//! | 6      | 2    | padding (0)  |
//! | 8      | 8    | mask         |
//! | 16     | 8    | timestamp_ns |
//! | 24     | 8    | sequence     |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::Registry;

/// "RAPD" as a 32-bit value.
pub const MASK_MAGIC: u32 = 0x5241_5044;
pub const MASK_VERSION: u8 = 1;
pub const MASK_RECORD_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalMask {
    pub version: u8,
    pub device_count: u8,
    /// Bit i set = device with bit assignment i is present.
    pub mask: u64,
    pub timestamp_ns: u64,
    /// Monotonic per-run publish counter.
    pub sequence: u64,
}

impl PhysicalMask {
    pub fn new(device_count: u8, mask: u64, timestamp_ns: u64, sequence: u64) -> Self {
        Self { version: MASK_VERSION, device_count, mask, timestamp_ns, sequence }
    }

    pub fn online_count(&self) -> u32 {
        self.mask.count_ones()
    }

    fn check_invariants(&self) -> Result<(), MaskError> {
        let valid_bits = if self.device_count >= 64 {
            u64::MAX
        } else {
            (1u64 << self.device_count) - 1
        };
        if self.mask & !valid_bits != 0 {
            return Err(MaskError::InvariantViolation(format!(
                "mask 0x{:x} has bits set at or above device_count {}",
                self.mask, self.device_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("short buffer: {0} bytes, need {MASK_RECORD_SIZE}")]
    ShortBuffer(usize),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("registry mismatch: mask device_count {mask} vs registry size {registry}")]
    RegistryMismatch { mask: u8, registry: usize },
}

pub fn encode_mask(m: &PhysicalMask) -> Result<[u8; MASK_RECORD_SIZE], MaskError> {
    m.check_invariants()?;
    let mut buf = [0u8; MASK_RECORD_SIZE];
    buf[0..4].copy_from_slice(&MASK_MAGIC.to_le_bytes());
    buf[4] = m.version;
    buf[5] = m.device_count;
    // bytes 6..8 stay zero (padding)
    buf[8..16].copy_from_slice(&m.mask.to_le_bytes());
    buf[16..24].copy_from_slice(&m.timestamp_ns.to_le_bytes());
    buf[24..32].copy_from_slice(&m.sequence.to_le_bytes());
    Ok(buf)
}

pub fn decode_mask(bytes: &[u8]) -> Result<PhysicalMask, MaskError> {
    if bytes.len() < MASK_RECORD_SIZE {
        return Err(MaskError::ShortBuffer(bytes.len()));
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != MASK_MAGIC {
        return Err(MaskError::BadMagic(magic));
    }
    let version = bytes[4];
    if version != MASK_VERSION {
        return Err(MaskError::UnsupportedVersion(version));
    }
    Ok(PhysicalMask {
        version,
        device_count: bytes[5],
        mask: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        timestamp_ns: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
        sequence: u64::from_le_bytes(bytes[24..32].try_into().unwrap()),
    })
}

/// Human-readable view written alongside the binary record at 1 Hz.
/// Field order matches the emitted JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDebugView {
    pub timestamp: String,
    pub device_count: u8,
    pub online_count: u32,
    pub mask: String,
    pub mask_binary: String,
    pub sequence: u64,
    pub devices: Vec<DeviceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub name: String,
    pub bit: u8,
    pub online: bool,
}

/// Binary digit string for the mask word: 8 digits when device_count <= 8,
/// else device_count rounded up to a multiple of 8.
fn mask_binary_string(mask: u64, device_count: u8) -> String {
    let width = if device_count <= 8 {
        8
    } else {
        ((device_count as usize + 7) / 8) * 8
    };
    (0..width).rev().map(|j| if mask >> j & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn debug_view(
    m: &PhysicalMask,
    registry: &Registry,
    wall_clock: &str,
) -> Result<MaskDebugView, MaskError> {
    if registry.len() != m.device_count as usize {
        return Err(MaskError::RegistryMismatch {
            mask: m.device_count,
            registry: registry.len(),
        });
    }
    let mut devices: Vec<DeviceEntry> = registry
        .descriptors
        .iter()
        .map(|d| DeviceEntry {
            name: d.name.clone(),
            bit: d.bit,
            online: m.mask >> d.bit & 1 == 1,
        })
        .collect();
    devices.sort_by_key(|d| d.bit);
    Ok(MaskDebugView {
        timestamp: wall_clock.to_owned(),
        device_count: m.device_count,
        online_count: m.online_count(),
        mask: format!("0x{:02x}", m.mask),
        mask_binary: mask_binary_string(m.mask, m.device_count),
        sequence: m.sequence,
        devices,
    })
}

/// JSON text of the debug view, keys in listing order.
pub fn render_debug(
    m: &PhysicalMask,
    registry: &Registry,
    wall_clock: &str,
) -> Result<String, MaskError> {
    let view = debug_view(m, registry, wall_clock)?;
    Ok(serde_json::to_string_pretty(&view).expect("debug view serializes"))
}

/// Current wall time as ISO-8601 UTC with seconds precision.
pub fn iso8601_utc_now() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default()
        .as_secs();
    format_unix_secs(now)
}

/// Civil-time formatting of a unix timestamp (proleptic Gregorian, UTC).
pub fn format_unix_secs(secs: u64) -> String {
    let days = secs / 86_400;
    let tod = secs % 86_400;
    let (y, m, d) = civil_from_days(days as i64);
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        tod / 3600,
        tod % 3600 / 60,
        tod % 60
    )
}

// Howard Hinnant's days-to-civil algorithm.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::load_registry;

    /// Independent byte assembler, written before the codec: lays fields
    /// down one byte at a time from the documented offsets.
    fn assemble_reference(m: &PhysicalMask) -> [u8; 32] {
        let mut b = [0u8; 32];
        let magic: u32 = 0x5241_5044;
        for i in 0..4 {
            b[i] = (magic >> (8 * i)) as u8;
        }
        b[4] = m.version;
        b[5] = m.device_count;
        for i in 0..8 {
            b[8 + i] = (m.mask >> (8 * i)) as u8;
            b[16 + i] = (m.timestamp_ns >> (8 * i)) as u8;
            b[24 + i] = (m.sequence >> (8 * i)) as u8;
        }
        b
    }

    fn three_device_registry() -> Registry {
        load_registry(
            r#"
[device.cam_wrist]
vid = "0x0001"
pid = "0x0002"
node = "n"
topic = "/rapid/cam"

[device.tac_left]
vid = "0x0003"
pid = "0x0004"
node = "n"
topic = "/rapid/tac"

[device.motor_grip]
vid = "0x0005"
pid = "0x0006"
node = "n"
topic = "/rapid/motor"
"#,
        )
        .unwrap()
    }

    #[test]
    fn appendix_example_layout() {
        let m = PhysicalMask::new(3, 0x05, 0, 0);
        let bytes = encode_mask(&m).unwrap();
        // magic LE: 44 50 41 52, then version, device_count, padding
        assert_eq!(&bytes[0..8], &[0x44, 0x50, 0x41, 0x52, 0x01, 0x03, 0x00, 0x00]);
        assert_eq!(bytes[8], 0x05);
        assert_eq!(&bytes[9..16], &[0u8; 7]);
    }

    #[test]
    fn empty_mask_encodes() {
        let m = PhysicalMask::new(0, 0, 0, 0);
        let bytes = encode_mask(&m).unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_mask(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_bit_above_device_count() {
        let m = PhysicalMask::new(3, 0x08, 0, 0);
        assert!(matches!(encode_mask(&m), Err(MaskError::InvariantViolation(_))));
    }

    #[test]
    fn decode_rejects_zero_magic() {
        assert!(matches!(decode_mask(&[0u8; 32]), Err(MaskError::BadMagic(0))));
    }

    #[test]
    fn decode_rejects_short_buffer() {
        assert!(matches!(decode_mask(&[0u8; 31]), Err(MaskError::ShortBuffer(31))));
    }

    #[test]
    fn decode_rejects_unknown_version() {
        let m = PhysicalMask::new(1, 1, 2, 3);
        let mut bytes = encode_mask(&m).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_mask(&bytes), Err(MaskError::UnsupportedVersion(9))));
    }

    #[test]
    fn roundtrip_random_masks_against_reference_assembler() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let device_count = rng.gen_range(0..=64u8);
            let valid = if device_count >= 64 { u64::MAX } else { (1u64 << device_count) - 1 };
            let m = PhysicalMask::new(device_count, rng.gen::<u64>() & valid, rng.gen(), rng.gen());
            let bytes = encode_mask(&m).unwrap();
            assert_eq!(bytes, assemble_reference(&m));
            assert_eq!(decode_mask(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn debug_view_matches_appendix_listing() {
        let reg = three_device_registry();
        let m = PhysicalMask::new(3, 0x05, 0, 123_456);
        let view = debug_view(&m, &reg, "2026-02-05T10:30:00Z").unwrap();
        assert_eq!(view.mask, "0x05");
        assert_eq!(view.mask_binary, "00000101");
        assert_eq!(view.online_count, 2);
        assert_eq!(view.sequence, 123_456);
        assert_eq!(view.devices.len(), 3);
        assert_eq!(
            (view.devices[0].name.as_str(), view.devices[0].bit, view.devices[0].online),
            ("cam_wrist", 0, true)
        );
        assert_eq!(
            (view.devices[1].name.as_str(), view.devices[1].bit, view.devices[1].online),
            ("tac_left", 1, false)
        );
        assert_eq!(
            (view.devices[2].name.as_str(), view.devices[2].bit, view.devices[2].online),
            ("motor_grip", 2, true)
        );
        let json = render_debug(&m, &reg, "2026-02-05T10:30:00Z").unwrap();
        let keys: Vec<&str> = ["timestamp", "device_count", "online_count", "mask", "mask_binary", "sequence", "devices"].to_vec();
        let mut last = 0;
        for k in keys {
            let pos = json.find(&format!("\"{k}\"")).expect(k);
            assert!(pos > last || last == 0, "key order: {k}");
            last = pos;
        }
    }

    #[test]
    fn debug_view_empty_registry() {
        let m = PhysicalMask::new(0, 0, 0, 0);
        let view = debug_view(&m, &Registry::default(), "2026-01-01T00:00:00Z").unwrap();
        assert_eq!(view.device_count, 0);
        assert_eq!(view.online_count, 0);
        assert!(view.devices.is_empty());
    }

    #[test]
    fn debug_view_rejects_registry_mismatch() {
        let reg = three_device_registry();
        let m = PhysicalMask::new(2, 0x01, 0, 0);
        assert!(matches!(
            debug_view(&m, &reg, "t"),
            Err(MaskError::RegistryMismatch { .. })
        ));
    }

    #[test]
    fn online_count_matches_naive_popcount() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let w: u64 = rng.gen();
            let m = PhysicalMask::new(64, w, 0, 0);
            let naive = (0..64).filter(|j| w >> j & 1 == 1).count() as u32;
            assert_eq!(m.online_count(), naive);
        }
    }

    #[test]
    fn mask_binary_width_rules() {
        assert_eq!(mask_binary_string(0x05, 3), "00000101");
        assert_eq!(mask_binary_string(0x05, 8), "00000101");
        assert_eq!(mask_binary_string(0x1ff, 9), "0000000111111111");
    }

    #[test]
    fn iso8601_formatting() {
        // 2026-02-05T10:30:00Z
        assert_eq!(format_unix_secs(1_770_287_400), "2026-02-05T10:30:00Z");
        assert_eq!(format_unix_secs(0), "1970-01-01T00:00:00Z");
    }
}

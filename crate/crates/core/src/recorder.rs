//! Episode container: collection-mode logging of synchronized streams
//! and mask snapshots, plus replay and dropout auditing.
//!
//! File layout (little-endian): magic "REPI", version u8, manifest_len
//! u32, manifest JSON, then records. Each record is channel_id u8,
//! timestamp_ns u64, payload_len u32, payload. Channel id 0 is reserved
//! for mask snapshots (payload = the 32-byte mask record). The manifest
//! carries the channel table and registry bit map, so an episode file is
//! self-contained for replay and audit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{decode_mask, PhysicalMask, MASK_RECORD_SIZE};
use crate::transport::Publisher;

pub const EPISODE_MAGIC: [u8; 4] = *b"REPI";
pub const EPISODE_VERSION: u8 = 1;
pub const MASK_CHANNEL_ID: u8 = 0;
/// Keepalive floor for mask records while recording (10 ms).
pub const MASK_KEEPALIVE_NS: u64 = 10_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub topic: String,
    pub shape: Vec<usize>,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u8,
    /// channel id -> channel description; id 0 is the mask channel.
    pub channels: BTreeMap<u8, ChannelInfo>,
    pub start_wall_time: String,
    /// mask bit -> device name, frozen at record time.
    pub bit_map: BTreeMap<u8, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub channel_id: u8,
    pub timestamp_ns: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("corrupt container at byte {offset}: {reason}")]
    CorruptContainer { offset: u64, reason: String },
    #[error("unknown channel id {0}")]
    UnknownChannel(u8),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub struct EpisodeWriter {
    out: BufWriter<File>,
    manifest: Manifest,
}

impl EpisodeWriter {
    pub fn create(path: impl AsRef<Path>, manifest: Manifest) -> Result<Self, EpisodeError> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(&EPISODE_MAGIC)?;
        out.write_all(&[EPISODE_VERSION])?;
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
        out.write_all(&manifest_json)?;
        Ok(Self { out, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn append(&mut self, record: &EpisodeRecord) -> Result<(), EpisodeError> {
        if record.channel_id != MASK_CHANNEL_ID
            && !self.manifest.channels.contains_key(&record.channel_id)
        {
            return Err(EpisodeError::UnknownChannel(record.channel_id));
        }
        self.out.write_all(&[record.channel_id])?;
        self.out.write_all(&record.timestamp_ns.to_le_bytes())?;
        self.out.write_all(&(record.payload.len() as u32).to_le_bytes())?;
        self.out.write_all(&record.payload)?;
        Ok(())
    }

    pub fn append_mask(&mut self, mask_bytes: &[u8; MASK_RECORD_SIZE], t_ns: u64) -> Result<(), EpisodeError> {
        self.append(&EpisodeRecord {
            channel_id: MASK_CHANNEL_ID,
            timestamp_ns: t_ns,
            payload: mask_bytes.to_vec(),
        })
    }

    pub fn finish(mut self) -> Result<(), EpisodeError> {
        self.out.flush()?;
        Ok(())
    }
}

pub struct EpisodeReader {
    manifest: Manifest,
    records: Vec<EpisodeRecord>,
}

impl EpisodeReader {
    /// Reads the whole container. A truncated tail is an error carrying
    /// the byte offset of the damage; everything before it was already
    /// validated.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EpisodeError> {
        let file = File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut offset: u64 = 0;

        let mut head = [0u8; 9];
        read_fully(&mut reader, &mut head, &mut offset, "header")?;
        if head[0..4] != EPISODE_MAGIC {
            return Err(EpisodeError::CorruptContainer {
                offset: 0,
                reason: format!("bad magic {:02x?}", &head[0..4]),
            });
        }
        if head[4] != EPISODE_VERSION {
            return Err(EpisodeError::CorruptContainer {
                offset: 4,
                reason: format!("unsupported version {}", head[4]),
            });
        }
        let manifest_len = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
        let mut manifest_buf = vec![0u8; manifest_len];
        read_fully(&mut reader, &mut manifest_buf, &mut offset, "manifest")?;
        let manifest: Manifest =
            serde_json::from_slice(&manifest_buf).map_err(|e| EpisodeError::CorruptContainer {
                offset: 9,
                reason: format!("manifest: {e}"),
            })?;

        let mut records = Vec::new();
        loop {
            let mut rec_head = [0u8; 13];
            match try_read_record_head(&mut reader, &mut rec_head) {
                HeadRead::Eof => break,
                HeadRead::Partial(n) => {
                    return Err(EpisodeError::CorruptContainer {
                        offset: offset + n as u64,
                        reason: "truncated record header".into(),
                    })
                }
                HeadRead::Full => {}
            }
            let record_offset = offset;
            offset += 13;
            let channel_id = rec_head[0];
            let timestamp_ns = u64::from_le_bytes(rec_head[1..9].try_into().unwrap());
            let payload_len = u32::from_le_bytes(rec_head[9..13].try_into().unwrap()) as usize;
            let mut payload = vec![0u8; payload_len];
            if let Err(e) = reader.read_exact(&mut payload) {
                return Err(EpisodeError::CorruptContainer {
                    offset: record_offset,
                    reason: format!("truncated payload ({e})"),
                });
            }
            offset += payload_len as u64;
            if channel_id != MASK_CHANNEL_ID && !manifest.channels.contains_key(&channel_id) {
                return Err(EpisodeError::CorruptContainer {
                    offset: record_offset,
                    reason: format!("record for undeclared channel {channel_id}"),
                });
            }
            records.push(EpisodeRecord { channel_id, timestamp_ns, payload });
        }
        Ok(Self { manifest, records })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn records_for(&self, channel_id: u8) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(move |r| r.channel_id == channel_id)
    }

    pub fn mask_records(&self) -> impl Iterator<Item = (u64, PhysicalMask)> + '_ {
        self.records_for(MASK_CHANNEL_ID)
            .filter_map(|r| decode_mask(&r.payload).ok().map(|m| (r.timestamp_ns, m)))
    }
}

enum HeadRead {
    Full,
    Partial(usize),
    Eof,
}

fn try_read_record_head(reader: &mut impl Read, buf: &mut [u8; 13]) -> HeadRead {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return if filled == 0 { HeadRead::Eof } else { HeadRead::Partial(filled) };
            }
            Ok(n) => filled += n,
            Err(_) => return HeadRead::Partial(filled),
        }
    }
    HeadRead::Full
}

fn read_fully(
    reader: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<(), EpisodeError> {
    reader.read_exact(buf).map_err(|e| EpisodeError::CorruptContainer {
        offset: *offset,
        reason: format!("short {what}: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Re-publishes every record on its original topic with inter-record
/// timing scaled by `speed` (0 = as fast as possible). Mask records go
/// out on the mask topic.
pub fn replay(
    reader: &EpisodeReader,
    publisher: &Publisher,
    mask_topic: &str,
    speed: f64,
) -> Result<usize, EpisodeError> {
    let records = reader.records();
    let Some(first) = records.first() else { return Ok(0) };
    let t0 = first.timestamp_ns;
    let wall_start = Instant::now();
    let mut published = 0;
    for rec in records {
        if speed > 0.0 {
            let offset_ns = ((rec.timestamp_ns.saturating_sub(t0)) as f64 / speed) as u64;
            let due = wall_start + Duration::from_nanos(offset_ns);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let topic = if rec.channel_id == MASK_CHANNEL_ID {
            mask_topic.to_owned()
        } else {
            reader
                .manifest()
                .channels
                .get(&rec.channel_id)
                .ok_or(EpisodeError::UnknownChannel(rec.channel_id))?
                .topic
                .clone()
        };
        publisher
            .publish(&topic, rec.timestamp_ns, &rec.payload)
            .map_err(|e| EpisodeError::CorruptContainer { offset: 0, reason: e.to_string() })?;
        published += 1;
    }
    Ok(published)
}

#[derive(Debug, Clone, Serialize)]
pub struct DropoutInterval {
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModalityReport {
    pub name: String,
    pub bit: u8,
    pub dropouts: Vec<DropoutInterval>,
    pub absent_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub episode_start_ns: u64,
    pub episode_end_ns: u64,
    pub modalities: Vec<ModalityReport>,
    /// Intervals where every required modality was present.
    pub usable_segments: Vec<DropoutInterval>,
}

/// Scans the mask record timeline: per modality, the closed intervals
/// where its bit was clear, and (for `required`) the sub-segments where
/// the whole subset was present.
pub fn audit(reader: &EpisodeReader, required: &[String]) -> Result<AuditReport, EpisodeError> {
    let masks: Vec<(u64, PhysicalMask)> = reader.mask_records().collect();
    let (start, end) = match (masks.first(), masks.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => (0, 0),
    };

    let mut modalities = Vec::new();
    for (bit, name) in &reader.manifest().bit_map {
        let mut dropouts = Vec::new();
        let mut open: Option<u64> = None;
        for (t, m) in &masks {
            let online = m.mask >> bit & 1 == 1;
            match (online, open) {
                (false, None) => open = Some(*t),
                (true, Some(s)) => {
                    dropouts.push(DropoutInterval { start_ns: s, end_ns: *t });
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            dropouts.push(DropoutInterval { start_ns: s, end_ns: end });
        }
        let absent_ns = dropouts.iter().map(|d| d.end_ns - d.start_ns).sum();
        modalities.push(ModalityReport { name: name.clone(), bit: *bit, dropouts, absent_ns });
    }

    let required_bits: Vec<u8> = reader
        .manifest()
        .bit_map
        .iter()
        .filter(|(_, n)| required.contains(n))
        .map(|(b, _)| *b)
        .collect();
    let mut usable_segments = Vec::new();
    if !masks.is_empty() {
        let mut open: Option<u64> = None;
        for (t, m) in &masks {
            let all_present = required_bits.iter().all(|b| m.mask >> b & 1 == 1);
            match (all_present, open) {
                (true, None) => open = Some(*t),
                (false, Some(s)) => {
                    usable_segments.push(DropoutInterval { start_ns: s, end_ns: *t });
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            usable_segments.push(DropoutInterval { start_ns: s, end_ns: end });
        }
    }

    Ok(AuditReport { episode_start_ns: start, episode_end_ns: end, modalities, usable_segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::encode_mask;

    fn manifest_two_channels() -> Manifest {
        let mut channels = BTreeMap::new();
        channels.insert(
            1,
            ChannelInfo {
                name: "cam".into(),
                topic: "/rapid/cam".into(),
                shape: vec![2, 2],
                rate_hz: 30.0,
            },
        );
        channels.insert(
            2,
            ChannelInfo {
                name: "tac".into(),
                topic: "/rapid/tac".into(),
                shape: vec![3],
                rate_hz: 30.0,
            },
        );
        let mut bit_map = BTreeMap::new();
        bit_map.insert(0, "cam".into());
        bit_map.insert(1, "tac".into());
        Manifest {
            format_version: EPISODE_VERSION,
            channels,
            start_wall_time: "2026-01-01T00:00:00Z".into(),
            bit_map,
        }
    }

    fn mask_bytes(word: u64, t: u64, seq: u64) -> [u8; MASK_RECORD_SIZE] {
        encode_mask(&PhysicalMask::new(2, word, t, seq)).unwrap()
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        w.append_mask(&mask_bytes(0b11, 0, 1), 0).unwrap();
        w.append(&EpisodeRecord { channel_id: 1, timestamp_ns: 10, payload: vec![1, 2, 3] })
            .unwrap();
        w.append(&EpisodeRecord { channel_id: 2, timestamp_ns: 20, payload: vec![4] }).unwrap();
        w.finish().unwrap();

        let r = EpisodeReader::open(&path).unwrap();
        assert_eq!(r.records().len(), 3);
        assert_eq!(r.manifest().channels.len(), 2);
        assert_eq!(r.records()[1].payload, vec![1, 2, 3]);
        let masks: Vec<_> = r.mask_records().collect();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].1.mask, 0b11);
    }

    #[test]
    fn undeclared_channel_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        let err = w
            .append(&EpisodeRecord { channel_id: 9, timestamp_ns: 0, payload: vec![] })
            .unwrap_err();
        assert!(matches!(err, EpisodeError::UnknownChannel(9)));
    }

    #[test]
    fn truncated_file_reports_damage_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        w.append(&EpisodeRecord { channel_id: 1, timestamp_ns: 10, payload: vec![7; 100] })
            .unwrap();
        w.append(&EpisodeRecord { channel_id: 2, timestamp_ns: 20, payload: vec![8; 100] })
            .unwrap();
        w.finish().unwrap();
        let full = std::fs::read(&path).unwrap();
        // Cut into the second record's payload.
        let cut = full.len() - 40;
        std::fs::write(&path, &full[..cut]).unwrap();
        let err = match EpisodeReader::open(&path) {
            Err(e) => e,
            Ok(_) => panic!("expected truncation error"),
        };
        match err {
            EpisodeError::CorruptContainer { offset, .. } => {
                assert!(offset > 0 && offset as usize <= cut, "offset {offset} cut {cut}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn intact_prefix_of_truncated_header_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        w.append(&EpisodeRecord { channel_id: 1, timestamp_ns: 10, payload: vec![7; 10] }).unwrap();
        w.finish().unwrap();
        let mut full = std::fs::read(&path).unwrap();
        // Append a partial record header, as a crashed writer would.
        full.extend_from_slice(&[2, 0, 0]);
        std::fs::write(&path, &full).unwrap();
        assert!(EpisodeReader::open(&path).is_err());
        // Damage is detectable and located; a salvage pass could read the
        // intact prefix by stopping at the reported offset.
    }

    #[test]
    fn audit_finds_constructed_dropout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        // Mask @ 100 Hz for 10 s; tactile (bit 1) off within [4 s, 6 s).
        let mut seq = 0;
        for i in 0..1000u64 {
            let t = i * 10_000_000;
            let word = if (4_000_000_000..6_000_000_000).contains(&t) { 0b01 } else { 0b11 };
            seq += 1;
            w.append_mask(&mask_bytes(word, t, seq), t).unwrap();
        }
        w.finish().unwrap();

        let r = EpisodeReader::open(&path).unwrap();
        let report = audit(&r, &["cam".into(), "tac".into()]).unwrap();
        let tac = report.modalities.iter().find(|m| m.name == "tac").unwrap();
        assert_eq!(tac.dropouts.len(), 1);
        let d = &tac.dropouts[0];
        let len = d.end_ns - d.start_ns;
        assert!(
            (len as i64 - 2_000_000_000).unsigned_abs() <= MASK_KEEPALIVE_NS,
            "dropout length {len}"
        );
        let cam = report.modalities.iter().find(|m| m.name == "cam").unwrap();
        assert!(cam.dropouts.is_empty());
        // Usable segments: before and after the dropout.
        assert_eq!(report.usable_segments.len(), 2);
    }

    #[test]
    fn audit_matches_brute_force_scan() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        let mut words = Vec::new();
        for i in 0..500u64 {
            let word = rng.gen_range(0..4u64);
            words.push((i * 10_000_000, word));
            w.append_mask(&mask_bytes(word, i * 10_000_000, i + 1), i * 10_000_000).unwrap();
        }
        w.finish().unwrap();
        let r = EpisodeReader::open(&path).unwrap();
        let report = audit(&r, &[]).unwrap();

        // Brute force: walk every record, tracking off-intervals per bit.
        for bit in 0..2u8 {
            let mut expected = Vec::new();
            let mut open: Option<u64> = None;
            for &(t, w) in &words {
                let online = w >> bit & 1 == 1;
                if !online && open.is_none() {
                    open = Some(t);
                } else if online {
                    if let Some(s) = open.take() {
                        expected.push((s, t));
                    }
                }
            }
            if let Some(s) = open {
                expected.push((s, words.last().unwrap().0));
            }
            let got: Vec<(u64, u64)> = report
                .modalities
                .iter()
                .find(|m| m.bit == bit)
                .unwrap()
                .dropouts
                .iter()
                .map(|d| (d.start_ns, d.end_ns))
                .collect();
            assert_eq!(got, expected, "bit {bit}");
        }
    }

    #[test]
    fn audit_no_dropouts_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.repi");
        let mut w = EpisodeWriter::create(&path, manifest_two_channels()).unwrap();
        for i in 0..100u64 {
            w.append_mask(&mask_bytes(0b11, i * 10_000_000, i + 1), i * 10_000_000).unwrap();
        }
        w.finish().unwrap();
        let r = EpisodeReader::open(&path).unwrap();
        let report = audit(&r, &["cam".into()]).unwrap();
        assert!(report.modalities.iter().all(|m| m.dropouts.is_empty()));
        assert_eq!(report.usable_segments.len(), 1);
    }
}

//! Approximate-time synchronization of multimodal streams with the mask.
//!
//! Group formation policy: the anchor is the earliest unconsumed sample
//! on the slowest-rate channel that is mask-present; every other present
//! channel contributes its unconsumed sample nearest in time within
//! ±window (ties go to the earlier sample). Absent channels (mask bit
//! clear) are zero-filled with present=false; present-but-silent channels
//! are zero-filled with stale=true. After a group is emitted at t_ref,
//! leftover samples at or before t_ref are dropped as late.

use std::collections::VecDeque;

use thiserror::Error;

use crate::mask::PhysicalMask;

pub const DEFAULT_SYNC_WINDOW_NS: u64 = 25_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub name: String,
    pub topic: String,
    pub shape: Vec<usize>,
    pub bit: u8,
    pub nominal_rate_hz: f64,
}

impl ChannelSpec {
    pub fn flat_len(&self) -> usize {
        self.shape.iter().product::<usize>().max(if self.shape.is_empty() { 0 } else { 1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub t_ns: u64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncedChannel {
    /// Always exactly the declared shape; zeros when not present.
    pub values: Vec<f32>,
    /// Mask bit set at t_ref.
    pub present: bool,
    /// Mask bit set but no sample within the window.
    pub stale: bool,
    pub source_timestamp_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncedObservation {
    pub t_ref: u64,
    pub channels: Vec<SyncedChannel>,
    pub mask_snapshot: PhysicalMask,
}

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
}

/// Mask record with timestamp closest to `t` (ties to the earlier one).
fn nearest_mask(history: &VecDeque<PhysicalMask>, t: u64) -> Option<PhysicalMask> {
    history
        .iter()
        .min_by_key(|m| (m.timestamp_ns.abs_diff(t), m.timestamp_ns))
        .copied()
}

pub struct Synchronizer {
    specs: Vec<ChannelSpec>,
    window_ns: u64,
    queues: Vec<VecDeque<ChannelSample>>,
    /// Highest timestamp seen per channel, for emission safety.
    high_water: Vec<Option<u64>>,
    mask_history: VecDeque<PhysicalMask>,
    last_t_ref: Option<u64>,
    late_drops: u64,
    /// Channel order for anchor preference: slowest rate first.
    anchor_order: Vec<usize>,
}

impl Synchronizer {
    pub fn new(specs: Vec<ChannelSpec>, window_ns: u64) -> Self {
        let mut anchor_order: Vec<usize> = (0..specs.len()).collect();
        anchor_order.sort_by(|&a, &b| {
            specs[a]
                .nominal_rate_hz
                .partial_cmp(&specs[b].nominal_rate_hz)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let n = specs.len();
        Self {
            specs,
            window_ns,
            queues: vec![VecDeque::new(); n],
            high_water: vec![None; n],
            mask_history: VecDeque::new(),
            last_t_ref: None,
            late_drops: 0,
            anchor_order,
        }
    }

    pub fn specs(&self) -> &[ChannelSpec] {
        &self.specs
    }

    pub fn late_drops(&self) -> u64 {
        self.late_drops
    }

    pub fn push_sample(&mut self, channel: usize, sample: ChannelSample) {
        if self.last_t_ref.is_some_and(|t| sample.t_ns <= t) {
            self.late_drops += 1;
            return;
        }
        self.high_water[channel] = Some(
            self.high_water[channel].map_or(sample.t_ns, |h| h.max(sample.t_ns)),
        );
        self.queues[channel].push_back(sample);
    }

    pub fn push_mask(&mut self, m: PhysicalMask) {
        self.mask_history.push_back(m);
        while self.mask_history.len() > 8192 {
            self.mask_history.pop_front();
        }
    }

    fn bit_set(&self, m: &PhysicalMask, channel: usize) -> bool {
        m.mask >> self.specs[channel].bit & 1 == 1
    }

    fn present_at(&self, channel: usize, t: u64) -> bool {
        nearest_mask(&self.mask_history, t)
            .map(|m| self.bit_set(&m, channel))
            .unwrap_or(false)
    }

    /// Next anchor: slowest-rate channel that has a queued sample and is
    /// mask-present at that sample's time.
    fn pick_anchor(&self) -> Option<(usize, u64)> {
        for &c in &self.anchor_order {
            if let Some(front) = self.queues[c].front() {
                if self.present_at(c, front.t_ns) {
                    return Some((c, front.t_ns));
                }
            }
        }
        None
    }

    /// Emits the next group if it is safe: every present non-anchor
    /// channel has either delivered a sample past t_ref + window or can
    /// be paired already. `force` skips the safety wait (end of stream or
    /// real-time deadline) and flags silent channels stale.
    pub fn try_emit(&mut self, force: bool) -> Option<SyncedObservation> {
        let (anchor, t_ref) = self.pick_anchor()?;
        if !force {
            for c in 0..self.specs.len() {
                if c == anchor || !self.present_at(c, t_ref) {
                    continue;
                }
                let settled = self.high_water[c].is_some_and(|h| h >= t_ref + self.window_ns);
                if !settled {
                    return None;
                }
            }
        }
        Some(self.emit_group(anchor, t_ref))
    }

    fn emit_group(&mut self, _anchor: usize, t_ref: u64) -> SyncedObservation {
        let mask_snapshot = nearest_mask(&self.mask_history, t_ref)
            .unwrap_or(PhysicalMask::new(self.specs.len() as u8, 0, t_ref, 0));
        let mut channels = Vec::with_capacity(self.specs.len());
        for c in 0..self.specs.len() {
            let flat = self.specs[c].flat_len();
            let present = self.bit_set(&mask_snapshot, c);
            if !present {
                channels.push(SyncedChannel {
                    values: vec![0.0; flat],
                    present: false,
                    stale: false,
                    source_timestamp_ns: None,
                });
                continue;
            }
            let chosen = self.take_nearest(c, t_ref);
            match chosen {
                Some(sample) => {
                    let mut values = sample.values;
                    values.resize(flat, 0.0);
                    channels.push(SyncedChannel {
                        values,
                        present: true,
                        stale: false,
                        source_timestamp_ns: Some(sample.t_ns),
                    });
                }
                None => channels.push(SyncedChannel {
                    values: vec![0.0; flat],
                    present: true,
                    stale: true,
                    source_timestamp_ns: None,
                }),
            }
        }
        self.last_t_ref = Some(t_ref);
        // Remaining samples at or before t_ref are late.
        for q in &mut self.queues {
            while q.front().is_some_and(|s| s.t_ns <= t_ref) {
                q.pop_front();
                self.late_drops += 1;
            }
        }
        SyncedObservation { t_ref, channels, mask_snapshot }
    }

    /// Removes and returns the queued sample nearest to t_ref within the
    /// window; ties go to the earlier sample.
    fn take_nearest(&mut self, channel: usize, t_ref: u64) -> Option<ChannelSample> {
        let q = &mut self.queues[channel];
        let best = q
            .iter()
            .enumerate()
            .filter(|(_, s)| s.t_ns.abs_diff(t_ref) <= self.window_ns)
            .min_by_key(|(_, s)| (s.t_ns.abs_diff(t_ref), s.t_ns))
            .map(|(i, _)| i)?;
        q.remove(best)
    }

    /// Drains every remaining group, flagging unpaired channels stale.
    pub fn flush(&mut self) -> Vec<SyncedObservation> {
        let mut out = Vec::new();
        while let Some(obs) = self.try_emit(true) {
            out.push(obs);
        }
        out
    }
}

/// Offline synchronization of complete traces.
pub fn synchronize_trace(
    specs: &[ChannelSpec],
    traces: &[Vec<ChannelSample>],
    mask_records: &[PhysicalMask],
    window_ns: u64,
) -> Vec<SyncedObservation> {
    assert_eq!(specs.len(), traces.len());
    let mut sync = Synchronizer::new(specs.to_vec(), window_ns);
    for m in mask_records {
        sync.push_mask(*m);
    }
    for (c, trace) in traces.iter().enumerate() {
        for s in trace {
            sync.push_sample(c, s.clone());
        }
    }
    sync.flush()
}

/// Concatenates channel payloads in spec order into one fixed-length
/// vector plus the per-channel presence flags.
pub fn assemble_observation_vector(obs: &SyncedObservation) -> (Vec<f32>, Vec<bool>) {
    let mut vector = Vec::new();
    let mut flags = Vec::with_capacity(obs.channels.len());
    for ch in &obs.channels {
        vector.extend_from_slice(&ch.values);
        flags.push(ch.present);
    }
    (vector, flags)
}

/// Per-pixel (current - reference) / 2 + 0.5, clamped to [0, 1].
pub fn diff_image(current: &[f32], reference: &[f32]) -> Result<Vec<f32>, SyncError> {
    if current.len() != reference.len() {
        return Err(SyncError::ShapeMismatch(current.len(), reference.len()));
    }
    Ok(current
        .iter()
        .zip(reference)
        .map(|(c, r)| ((c - r) / 2.0 + 0.5).clamp(0.0, 1.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1_000_000;

    fn spec(name: &str, bit: u8, rate: f64, shape: &[usize]) -> ChannelSpec {
        ChannelSpec {
            name: name.into(),
            topic: format!("/rapid/{name}"),
            shape: shape.to_vec(),
            bit,
            nominal_rate_hz: rate,
        }
    }

    fn sample(t_ms: u64, v: f32) -> ChannelSample {
        ChannelSample { t_ns: t_ms * MS, values: vec![v] }
    }

    fn mask_at(t_ms: u64, word: u64, count: u8) -> PhysicalMask {
        PhysicalMask::new(count, word, t_ms * MS, t_ms)
    }

    #[test]
    fn camera_and_tactile_align_within_window() {
        let specs = vec![spec("cam", 0, 30.0, &[1]), spec("tac", 1, 60.0, &[1])];
        let obs = synchronize_trace(
            &specs,
            &[vec![sample(100_000, 1.0)], vec![sample(100_010, 2.0)]],
            &[mask_at(100_000, 0b11, 2)],
            DEFAULT_SYNC_WINDOW_NS,
        );
        assert_eq!(obs.len(), 1);
        assert!(obs[0].channels[0].present && !obs[0].channels[0].stale);
        assert!(obs[0].channels[1].present && !obs[0].channels[1].stale);
        assert_eq!(obs[0].channels[1].values, vec![2.0]);
        assert_eq!(obs[0].t_ref, 100_000 * MS);
    }

    #[test]
    fn mask_clear_channel_is_zero_filled_not_present() {
        let specs = vec![spec("cam", 0, 30.0, &[2]), spec("tac", 1, 60.0, &[3])];
        let obs = synchronize_trace(
            &specs,
            &[
                vec![ChannelSample { t_ns: 100 * MS, values: vec![1.0, 1.0] }],
                vec![ChannelSample { t_ns: 100 * MS, values: vec![9.0, 9.0, 9.0] }],
            ],
            &[mask_at(100, 0b01, 2)],
            DEFAULT_SYNC_WINDOW_NS,
        );
        assert_eq!(obs.len(), 1);
        let tac = &obs[0].channels[1];
        assert!(!tac.present);
        assert_eq!(tac.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn present_but_silent_channel_is_stale() {
        let specs = vec![spec("cam", 0, 30.0, &[1]), spec("tac", 1, 60.0, &[1])];
        let obs = synchronize_trace(
            &specs,
            &[vec![sample(100, 1.0)], vec![]],
            &[mask_at(100, 0b11, 2)],
            DEFAULT_SYNC_WINDOW_NS,
        );
        assert_eq!(obs.len(), 1);
        let tac = &obs[0].channels[1];
        assert!(tac.present && tac.stale);
        assert_eq!(tac.values, vec![0.0]);
    }

    #[test]
    fn samples_outside_window_are_not_paired() {
        let specs = vec![spec("cam", 0, 30.0, &[1]), spec("tac", 1, 60.0, &[1])];
        let obs = synchronize_trace(
            &specs,
            &[vec![sample(100, 1.0)], vec![sample(130, 2.0)]],
            &[mask_at(100, 0b11, 2)],
            25 * MS,
        );
        // 30 ms gap > 25 ms window: tactile is stale in the first group
        // and anchors its own later group.
        assert!(obs[0].channels[1].stale);
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[1].t_ref, 130 * MS);
        assert_eq!(obs[1].channels[1].values, vec![2.0]);
    }

    #[test]
    fn tie_breaks_to_earlier_sample() {
        let specs = vec![spec("cam", 0, 30.0, &[1]), spec("tac", 1, 60.0, &[1])];
        let obs = synchronize_trace(
            &specs,
            &[vec![sample(100, 1.0)], vec![sample(90, 2.0), sample(110, 3.0)]],
            &[mask_at(100, 0b11, 2)],
            25 * MS,
        );
        assert_eq!(obs[0].channels[1].values, vec![2.0]);
    }

    #[test]
    fn t_ref_strictly_increasing_and_fixed_dims() {
        let specs = vec![spec("cam", 0, 30.0, &[2, 2]), spec("tac", 1, 60.0, &[3])];
        let cam: Vec<ChannelSample> = (0..20)
            .map(|i| ChannelSample { t_ns: (100 + i * 33) * MS, values: vec![1.0; 4] })
            .collect();
        let tac: Vec<ChannelSample> = (0..40)
            .map(|i| ChannelSample { t_ns: (95 + i * 17) * MS, values: vec![2.0; 3] })
            .collect();
        let masks: Vec<PhysicalMask> =
            (0..100).map(|i| mask_at(90 + i * 10, 0b11, 2)).collect();
        let obs = synchronize_trace(&specs, &[cam, tac], &masks, 25 * MS);
        assert!(!obs.is_empty());
        let mut last = 0;
        for o in &obs {
            assert!(o.t_ref > last);
            last = o.t_ref;
            assert_eq!(o.channels[0].values.len(), 4);
            assert_eq!(o.channels[1].values.len(), 3);
            for ch in &o.channels {
                if let Some(ts) = ch.source_timestamp_ns {
                    assert!(ts.abs_diff(o.t_ref) <= 25 * MS, "window soundness");
                }
            }
        }
    }

    #[test]
    fn assemble_vector_shapes_and_zero_spans() {
        let specs = vec![spec("a", 0, 30.0, &[2, 2]), spec("b", 1, 30.0, &[3])];
        let obs = synchronize_trace(
            &specs,
            &[
                vec![ChannelSample { t_ns: 100 * MS, values: vec![1.0; 4] }],
                vec![ChannelSample { t_ns: 100 * MS, values: vec![2.0; 3] }],
            ],
            &[mask_at(100, 0b01, 2)],
            25 * MS,
        );
        let (vector, flags) = assemble_observation_vector(&obs[0]);
        assert_eq!(vector.len(), 7);
        assert_eq!(flags, vec![true, false]);
        assert_eq!(&vector[4..7], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn vector_length_invariant_over_presence_patterns() {
        let specs: Vec<ChannelSpec> = (0..4).map(|i| spec(&format!("c{i}"), i, 30.0, &[2])).collect();
        for pattern in 0..16u64 {
            let traces: Vec<Vec<ChannelSample>> =
                (0..4).map(|_| vec![ChannelSample { t_ns: 100 * MS, values: vec![1.0, 1.0] }]).collect();
            let obs =
                synchronize_trace(&specs, &traces, &[mask_at(100, pattern, 4)], 25 * MS);
            if pattern == 0 {
                assert!(obs.is_empty());
                continue;
            }
            let (v, _) = assemble_observation_vector(&obs[0]);
            assert_eq!(v.len(), 8, "pattern {pattern:04b}");
            for (c, ch) in obs[0].channels.iter().enumerate() {
                if pattern >> c & 1 == 0 {
                    assert_eq!(ch.values, vec![0.0, 0.0]);
                    assert!(!ch.present);
                }
            }
        }
    }

    #[test]
    fn diff_image_identities() {
        let img = vec![0.25, 0.5, 0.75, 1.0];
        let same = diff_image(&img, &img).unwrap();
        assert!(same.iter().all(|&p| (p - 0.5).abs() < 1e-6));
        assert_eq!(diff_image(&[1.0], &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(diff_image(&[0.0], &[1.0]).unwrap(), vec![0.0]);
        assert!(matches!(diff_image(&[0.0], &[0.0, 0.0]), Err(SyncError::ShapeMismatch(1, 2))));
    }

    #[test]
    fn diff_image_matches_scalar_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..64);
            let cur: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let refr: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let out = diff_image(&cur, &refr).unwrap();
            for i in 0..n {
                let expected = ((cur[i] - refr[i]) / 2.0 + 0.5).clamp(0.0, 1.0);
                assert!((out[i] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn late_samples_counted() {
        let specs = vec![spec("a", 0, 30.0, &[1])];
        let mut sync = Synchronizer::new(specs, 25 * MS);
        sync.push_mask(mask_at(0, 0b1, 1));
        sync.push_sample(0, sample(100, 1.0));
        assert!(sync.try_emit(true).is_some());
        sync.push_sample(0, sample(90, 2.0));
        assert_eq!(sync.late_drops(), 1);
    }
}

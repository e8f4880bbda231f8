//! Oversampling strategies for long-tailed segmentation data.
//!
//! * Repeat factor sampling: each image is repeated per epoch according to
//!   the rarest class it contains, `r_c = max(1, sqrt(t / f_c))`,
//!   `r_I = max_{c in I} r_c`, with `r_I` stochastically rounded every epoch.
//! * Adaptive sampling: batch slots are assigned to classes with probability
//!   `softmax(1 - iou_c^2)` over a smoothed per-class IoU, and each slot is
//!   filled with the best of a few random candidates for its class.
//! * Uniform: one shuffled pass, the baseline.
//!
//! All draws come from named substreams of the configured seed, so every
//! output is a pure function of its inputs and `(seed, epoch/step)`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{class_frequencies, DatasetManifest, RecordStats};
use crate::rng::{substream, Generator};

/// Frequency threshold below which classes get oversampled.
pub const DEFAULT_THRESHOLD: f64 = 0.15;
/// Repeat factor for classes that never occur (the formula diverges at f_c = 0).
pub const ZERO_FREQUENCY_CAP: f64 = 20.0;
pub const DEFAULT_SMOOTHING: f64 = 0.1;
pub const DEFAULT_IOU_INIT: f64 = 0.5;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_CANDIDATES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatFactorConfig {
    #[serde(default = "default_threshold")]
    pub t: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub zero_frequency_cap: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_cap() -> f64 {
    ZERO_FREQUENCY_CAP
}

impl Default for RepeatFactorConfig {
    fn default() -> Self {
        Self {
            t: DEFAULT_THRESHOLD,
            seed: 0,
            zero_frequency_cap: ZERO_FREQUENCY_CAP,
        }
    }
}

impl RepeatFactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::validation(format!("repeat factor threshold t must be in (0,1], got {}", self.t)));
        }
        if !(self.zero_frequency_cap >= 1.0) {
            return Err(Error::validation("zero-frequency cap must be at least 1"));
        }
        Ok(())
    }
}

/// `max(1, sqrt(t / f_c))`, with absent classes (f_c = 0) mapped to the default cap.
pub fn class_repeat_factor(f_c: f64, t: f64) -> f64 {
    class_repeat_factor_capped(f_c, t, ZERO_FREQUENCY_CAP)
}

pub fn class_repeat_factor_capped(f_c: f64, t: f64, cap: f64) -> f64 {
    if f_c <= 0.0 {
        return cap;
    }
    f64::max(1.0, (t / f_c).sqrt())
}

/// Largest class repeat factor among the classes present in the record.
pub fn image_repeat_factor(record: &RecordStats, class_factors: &[f64]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for c in record.present_classes() {
        let r = *class_factors.get(c).ok_or_else(|| {
            Error::validation(format!("record {}: no repeat factor for class {c}", record.record_id))
        })?;
        best = Some(best.map_or(r, |b| b.max(r)));
    }
    best.ok_or_else(|| Error::validation(format!("record {} has no labelled pixels", record.record_id)))
}

/// Image repeat factors for every record, in manifest order.
pub fn repeat_factors(manifest: &DatasetManifest, cfg: &RepeatFactorConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let class_factors: Vec<f64> = class_frequencies(manifest)
        .into_iter()
        .map(|f| class_repeat_factor_capped(f, cfg.t, cfg.zero_frequency_cap))
        .collect();
    manifest
        .records
        .iter()
        .map(|r| image_repeat_factor(r, &class_factors))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanEntry {
    pub record_index: usize,
    pub record_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub epoch_index: u64,
    pub entries: Vec<PlanEntry>,
    /// r_I per manifest record (all 1.0 for a uniform plan).
    pub source_repeat_factors: Vec<f64>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.record_index)
    }

    /// Occurrences of each manifest record in this plan.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.source_repeat_factors.len()];
        for e in &self.entries {
            counts[e.record_index] += 1;
        }
        counts
    }

    /// One `{"epoch":k,"record":"id"}` line per entry.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            epoch: u64,
            record: &'a str,
        }
        for e in &self.entries {
            let line = Line {
                epoch: self.epoch_index,
                record: &e.record_id,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `floor(r)` plus one more with probability `frac(r)`.
pub fn stochastic_round(r: f64, rng: &mut impl Rng) -> usize {
    let base = r.floor();
    let frac = r - base;
    base as usize + usize::from(rng.gen::<f64>() < frac)
}

fn plan_from_factors(manifest: &DatasetManifest, factors: Vec<f64>, epoch_index: u64, rng: &mut Generator) -> EpochPlan {
    let mut entries = Vec::new();
    for (index, (record, &r)) in manifest.records.iter().zip(&factors).enumerate() {
        for _ in 0..stochastic_round(r, rng) {
            entries.push(PlanEntry {
                record_index: index,
                record_id: record.record_id.clone(),
            });
        }
    }
    entries.shuffle(rng);
    EpochPlan {
        epoch_index,
        entries,
        source_repeat_factors: factors,
    }
}

/// Repeat-factor epoch plan; deterministic in `(cfg.seed, epoch_index)`.
pub fn build_epoch_plan(manifest: &DatasetManifest, cfg: &RepeatFactorConfig, epoch_index: u64) -> Result<EpochPlan> {
    let factors = repeat_factors(manifest, cfg)?;
    let mut rng = substream(cfg.seed, "plan", epoch_index);
    Ok(plan_from_factors(manifest, factors, epoch_index, &mut rng))
}

/// One shuffled pass over all records.
pub fn uniform_epoch(manifest: &DatasetManifest, seed: u64, epoch_index: u64) -> EpochPlan {
    let mut rng = substream(seed, "uniform", epoch_index);
    plan_from_factors(manifest, vec![1.0; manifest.len()], epoch_index, &mut rng)
}

/// Exponentially smoothed per-class IoU.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUState {
    pub ema: Vec<f64>,
    pub smoothing: f64,
    pub steps: u64,
}

#[derive(Serialize, Deserialize)]
struct IoUStateFile {
    ema: BTreeMap<String, f64>,
    smoothing: f64,
    steps: u64,
}

impl IoUState {
    pub fn new(num_classes: usize) -> Self {
        Self::with_params(num_classes, DEFAULT_SMOOTHING, DEFAULT_IOU_INIT)
    }

    pub fn with_params(num_classes: usize, smoothing: f64, init: f64) -> Self {
        Self {
            ema: vec![init; num_classes],
            smoothing,
            steps: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.ema.len()
    }

    /// `ema <- (1 - s) * ema + s * observed` for each observed class.
    pub fn observe(&mut self, observed: &BTreeMap<usize, f64>) -> Result<()> {
        for (&class, &v) in observed {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("observed IoU {v} for class {class} outside [0,1]")));
            }
            if class >= self.ema.len() {
                return Err(Error::validation(format!("observed class {class} outside {} classes", self.ema.len())));
            }
        }
        let s = self.smoothing;
        for (&class, &v) in observed {
            let e = &mut self.ema[class];
            *e = (1.0 - s) * *e + s * v;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = IoUStateFile {
            ema: self.ema.iter().enumerate().map(|(c, v)| (c.to_string(), *v)).collect(),
            smoothing: self.smoothing,
            steps: self.steps,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IoUStateFile = serde_json::from_str(text)?;
        let mut ema = vec![f64::NAN; file.ema.len()];
        for (key, v) in file.ema {
            let c: usize = key
                .parse()
                .map_err(|_| Error::validation(format!("IoU state key {key:?} is not a class id")))?;
            let slot = ema
                .get_mut(c)
                .ok_or_else(|| Error::validation("IoU state class ids must be contiguous from 0"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("IoU state value {v} outside [0,1]")));
            }
            *slot = v;
        }
        Ok(Self {
            ema,
            smoothing: file.smoothing,
            steps: file.steps,
        })
    }
}

pub fn update_iou_ema(state: &IoUState, observed: &BTreeMap<usize, f64>) -> Result<IoUState> {
    let mut next = state.clone();
    next.observe(observed)?;
    Ok(next)
}

/// `softmax(1 - ema^2)` over classes.
pub fn adaptive_class_probs(state: &IoUState) -> Vec<f64> {
    let mut p: Vec<f64> = state.ema.iter().map(|e| 1.0 - e * e).collect();
    crate::diffmath::softmax_in_place(&mut p);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_candidates")]
    pub candidates_per_slot: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_candidates() -> usize {
    DEFAULT_CANDIDATES
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            candidates_per_slot: DEFAULT_CANDIDATES,
            seed: 0,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.candidates_per_slot == 0 {
            return Err(Error::validation("adaptive batch size and candidates per slot must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AdaptiveBatch {
    /// Class each slot was assigned to.
    pub targets: Vec<usize>,
    /// Manifest index chosen for each slot.
    pub records: Vec<usize>,
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// The candidate with the most pixels of `class`; ties go to the smaller manifest index.
pub fn select_max_pixel(manifest: &DatasetManifest, candidates: &[usize], class: usize) -> usize {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let (nc, nb) = (manifest.records[c].count(class), manifest.records[best].count(class));
        if nc > nb || (nc == nb && c < best) {
            best = c;
        }
    }
    best
}

/// Compose one batch; deterministic in `(cfg.seed, step)` and the state.
pub fn adaptive_batch(manifest: &DatasetManifest, state: &IoUState, cfg: &AdaptiveConfig, step: u64) -> Result<AdaptiveBatch> {
    cfg.validate()?;
    if state.num_classes() != manifest.num_classes() {
        return Err(Error::validation(format!(
            "IoU state covers {} classes, task has {}",
            state.num_classes(),
            manifest.num_classes()
        )));
    }
    let probs = adaptive_class_probs(state);
    let mut slot_rng = substream(cfg.seed, "slots", step);
    let mut cand_rng = substream(cfg.seed, "candidates", step);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    let mut records = Vec::with_capacity(cfg.batch_size);
    let mut candidates = vec![0usize; cfg.candidates_per_slot];
    for _ in 0..cfg.batch_size {
        let class = sample_categorical(&probs, &mut slot_rng);
        for c in candidates.iter_mut() {
            *c = cand_rng.gen_range(0..manifest.len());
        }
        targets.push(class);
        records.push(select_max_pixel(manifest, &candidates, class));
    }
    Ok(AdaptiveBatch { targets, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{ClassGroup, ClassSpec, TaskId, TaskSpec};

    fn task(n: usize) -> TaskSpec {
        let classes = (0..n)
            .map(|id| ClassSpec {
                id,
                name: format!("c{id}"),
                group: if id == 0 { ClassGroup::Anatomy } else { ClassGroup::Instrument },
            })
            .collect();
        TaskSpec::new(TaskId::Custom("toy".into()), classes).unwrap()
    }

    fn record(id: usize, counts: &[(usize, u64)]) -> RecordStats {
        RecordStats {
            record_id: format!("r{id:03}"),
            width: 32,
            height: 32,
            pixel_counts: counts.iter().copied().collect(),
            image_path: None,
            label_path: None,
        }
    }

    /// `n` records of class 0, with class 1 also present in the first `k`.
    fn manifest_with_rare(n: usize, k: usize) -> DatasetManifest {
        let records = (0..n)
            .map(|i| if i < k { record(i, &[(0, 900), (1, 100)]) } else { record(i, &[(0, 1000)]) })
            .collect();
        DatasetManifest::new(records, task(2)).unwrap()
    }

    #[test]
    fn class_factor_examples() {
        assert_eq!(class_repeat_factor(0.15, 0.15), 1.0);
        assert_eq!(class_repeat_factor(0.6, 0.15), 1.0);
        assert_eq!(class_repeat_factor(0.0375, 0.15), 2.0);
        // sqrt(0.15 / 0.01) = sqrt(15)
        let r = class_repeat_factor(0.01, 0.15);
        assert!((r - 15f64.sqrt()).abs() < 1e-12);
        assert!((r - 3.8730).abs() < 1e-4);
        assert_eq!(class_repeat_factor(0.0, 0.15), ZERO_FREQUENCY_CAP);
        assert_eq!(class_repeat_factor_capped(0.0, 0.15, 7.0), 7.0);
    }

    #[test]
    fn image_factor_is_max_over_present_classes() {
        let r = [1.0, 2.5, 9.0];
        assert_eq!(image_repeat_factor(&record(0, &[(0, 5)]), &r).unwrap(), 1.0);
        assert_eq!(image_repeat_factor(&record(0, &[(0, 5), (1, 5)]), &r).unwrap(), 2.5);
        // zero counts are not presence
        assert_eq!(image_repeat_factor(&record(0, &[(1, 5), (2, 0)]), &r).unwrap(), 2.5);
        assert!(image_repeat_factor(&record(0, &[]), &r).is_err());
        assert!(image_repeat_factor(&record(0, &[(0, 0)]), &r).is_err());
    }

    #[test]
    fn all_ones_plan_is_a_permutation() {
        let m = manifest_with_rare(20, 20);
        let plan = build_epoch_plan(&m, &RepeatFactorConfig::default(), 0).unwrap();
        assert_eq!(plan.len(), 20);
        assert!(plan.counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn plan_is_deterministic_per_seed_and_epoch() {
        let m = manifest_with_rare(40, 2);
        let cfg = RepeatFactorConfig { seed: 9, ..Default::default() };
        let a = build_epoch_plan(&m, &cfg, 3).unwrap();
        assert_eq!(a, build_epoch_plan(&m, &cfg, 3).unwrap());
        assert_ne!(a.entries, build_epoch_plan(&m, &cfg, 4).unwrap().entries);
    }

    #[test]
    fn invalid_threshold_rejected() {
        let m = manifest_with_rare(4, 1);
        for t in [0.0, -0.1, 1.5] {
            let cfg = RepeatFactorConfig { t, ..Default::default() };
            assert!(build_epoch_plan(&m, &cfg, 0).is_err());
        }
    }

    #[test]
    fn two_record_plan_mean_length() {
        // With two records f_c >= 0.5, so r_I = 1.5 would need t > 1; feed the factors directly.
        let m = manifest_with_rare(2, 1);
        let mut total = 0usize;
        let epochs = 10_000;
        for e in 0..epochs {
            let mut rng = substream(11, "plan", e);
            let plan = plan_from_factors(&m, vec![1.0, 1.5], e, &mut rng);
            assert!(plan.len() == 2 || plan.len() == 3);
            total += plan.len();
        }
        let mean = total as f64 / epochs as f64;
        assert!((mean - 2.5).abs() < 0.02, "mean plan length {mean}");
    }

    #[test]
    fn counts_bracket_repeat_factor_and_every_record_appears() {
        let m = manifest_with_rare(100, 1);
        let cfg = RepeatFactorConfig { seed: 5, ..Default::default() };
        let factors = repeat_factors(&m, &cfg).unwrap();
        // f_1 = 0.01 -> r = sqrt(15)
        assert!((factors[0] - 15f64.sqrt()).abs() < 1e-12);
        assert!(factors[1..].iter().all(|&r| r == 1.0));
        let epochs = 2000;
        let mut total = 0usize;
        for e in 0..epochs {
            let plan = build_epoch_plan(&m, &cfg, e).unwrap();
            let counts = plan.counts();
            assert!(counts.iter().all(|&c| c >= 1));
            assert!(counts[0] == 3 || counts[0] == 4);
            total += counts[0];
        }
        let mean = total as f64 / epochs as f64;
        assert!((mean - 3.873).abs() < 0.05, "mean exposure {mean}");
    }

    #[test]
    fn uniform_epoch_examples() {
        let single = DatasetManifest::new(vec![record(0, &[(0, 1)])], task(2)).unwrap();
        assert_eq!(uniform_epoch(&single, 1, 0).len(), 1);

        let m = manifest_with_rare(16, 3);
        let first = uniform_epoch(&m, 7, 0);
        let mut ids: Vec<usize> = first.indices().collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..16).collect::<Vec<_>>());
        let distinct = (1..100)
            .filter(|&e| uniform_epoch(&m, 7, e).entries != first.entries)
            .count();
        assert_eq!(distinct, 99);
        assert_eq!(uniform_epoch(&m, 7, 5), uniform_epoch(&m, 7, 5));
    }

    #[test]
    fn plan_jsonl_lines() {
        let m = manifest_with_rare(2, 0);
        let plan = uniform_epoch(&m, 0, 4);
        let mut buf = Vec::new();
        plan.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["epoch"], 4);
            assert!(v["record"].as_str().unwrap().starts_with('r'));
        }
    }

    #[test]
    fn ema_updates() {
        let mut s = IoUState::new(3);
        let next = update_iou_ema(&s, &BTreeMap::from([(0, 1.0)])).unwrap();
        assert!((next.ema[0] - 0.55).abs() < 1e-15);
        assert_eq!(next.ema[1], 0.5);
        assert_eq!(next.steps, 1);

        let fixed = update_iou_ema(&s, &BTreeMap::from([(2, 0.5)])).unwrap();
        assert_eq!(fixed.ema[2], 0.5);

        for _ in 0..50 {
            s.observe(&BTreeMap::from([(1, 0.8)])).unwrap();
        }
        let expected = 0.8 + (0.5 - 0.8) * 0.9f64.powi(50);
        assert!((s.ema[1] - expected).abs() < 1e-12);
        assert!((s.ema[1] - 0.7985).abs() < 1e-4);
        assert_eq!(s.ema[0], 0.5);

        assert!(s.observe(&BTreeMap::from([(0, 1.2)])).is_err());
        assert!(s.observe(&BTreeMap::from([(0, -0.1)])).is_err());
        assert!(s.observe(&BTreeMap::from([(9, 0.1)])).is_err());
    }

    #[test]
    fn iou_state_json_roundtrip() {
        let mut s = IoUState::new(4);
        s.observe(&BTreeMap::from([(3, 0.25)])).unwrap();
        let back = IoUState::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn class_prob_examples() {
        let uniform = adaptive_class_probs(&IoUState::new(5));
        assert!(uniform.iter().all(|p| (p - 0.2).abs() < 1e-15));

        let s = IoUState { ema: vec![0.0, 1.0, 1.0], smoothing: 0.1, steps: 0 };
        let p = adaptive_class_probs(&s);
        let e = std::f64::consts::E;
        let oracle = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in p.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.5761).abs() < 1e-4 && (p[1] - 0.2119).abs() < 1e-4);

        assert_eq!(adaptive_class_probs(&IoUState::new(1)), vec![1.0]);
    }

    #[test]
    fn single_record_batch() {
        let m = DatasetManifest::new(vec![record(0, &[(0, 10)])], task(2)).unwrap();
        let cfg = AdaptiveConfig { batch_size: 1, ..Default::default() };
        let b = adaptive_batch(&m, &IoUState::new(2), &cfg, 0).unwrap();
        assert_eq!(b.records, vec![0]);
    }

    #[test]
    fn max_pixel_selection_and_tie_break() {
        let records = vec![record(0, &[(1, 10)]), record(1, &[(1, 500)]), record(2, &[(0, 7)])];
        let m = DatasetManifest::new(records, task(2)).unwrap();
        assert_eq!(select_max_pixel(&m, &[0, 1, 2], 1), 1);
        assert_eq!(select_max_pixel(&m, &[2, 0, 1], 1), 1);

        let tied = vec![record(0, &[(1, 50)]), record(1, &[(1, 50)]), record(2, &[(0, 7)])];
        let m = DatasetManifest::new(tied, task(2)).unwrap();
        assert_eq!(select_max_pixel(&m, &[1, 0], 1), 0);
        assert_eq!(select_max_pixel(&m, &[2, 1, 0, 1], 1), 0);
        // no candidate has the class: smallest index among the zero-count tie
        assert_eq!(select_max_pixel(&m, &[2, 1], 2), 1);
    }

    #[test]
    fn adaptive_batch_prefers_class_rich_records() {
        let mut records: Vec<_> = (0..50).map(|i| record(i, &[(0, 1000)])).collect();
        records[17] = record(17, &[(0, 500), (1, 500)]);
        let m = DatasetManifest::new(records, task(2)).unwrap();
        // class 1 doing terribly, class 0 perfect
        let state = IoUState { ema: vec![1.0, 0.0], smoothing: 0.1, steps: 0 };
        let cfg = AdaptiveConfig { batch_size: 8, candidates_per_slot: 10, seed: 3 };
        let mut hits = 0;
        let mut slots = 0;
        for step in 0..200 {
            let b = adaptive_batch(&m, &state, &cfg, step).unwrap();
            assert_eq!(b, adaptive_batch(&m, &state, &cfg, step).unwrap());
            for (t, r) in b.targets.iter().zip(&b.records) {
                if *t == 1 {
                    slots += 1;
                    hits += usize::from(*r == 17);
                }
            }
        }
        // P(record 17 among 10 candidates) = 1 - (49/50)^10 ~ 0.183
        let rate = hits as f64 / slots as f64;
        assert!((rate - 0.183).abs() < 0.05, "hit rate {rate}");
    }

    #[test]
    fn uniform_state_slots_pass_chi_square() {
        let m = DatasetManifest::new((0..10).map(|i| record(i, &[(0, 1)])).collect(), task(8)).unwrap();
        let cfg = AdaptiveConfig { batch_size: 100, candidates_per_slot: 1, seed: 21 };
        let mut hist = [0usize; 8];
        for step in 0..100 {
            for t in adaptive_batch(&m, &IoUState::new(8), &cfg, step).unwrap().targets {
                hist[t] += 1;
            }
        }
        let expected = 10_000.0 / 8.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 7 degrees of freedom, alpha = 0.01
        assert!(chi2 < 18.475, "chi2 = {chi2}, hist = {hist:?}");
    }

    #[test]
    fn state_size_must_match_task() {
        let m = manifest_with_rare(3, 1);
        assert!(adaptive_batch(&m, &IoUState::new(3), &AdaptiveConfig::default(), 0).is_err());
        let bad = AdaptiveConfig { batch_size: 0, ..Default::default() };
        assert!(adaptive_batch(&m, &IoUState::new(2), &bad, 0).is_err());
    }
}

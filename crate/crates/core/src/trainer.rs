//! Deterministic training loop for a per-pixel toy classifier.
//!
//! The model maps every pixel's feature vector to class logits with one or
//! two affine layers. Each epoch traverses a sampler-specific sequence of
//! batches, applies augmentations, takes Adam steps with the scheduled
//! learning rate and evaluates on a held-out split. The step itself is
//! single-threaded; evaluation runs on the rayon pool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob;
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::labelmap::LabelMap;
use crate::losses::{batch_loss, LossKind, DEFAULT_OHEM_THRESHOLD};
use crate::manifest::{load_manifest, rare_classes, DatasetManifest, DEFAULT_RARE_THRESHOLD};
use crate::metrics::{iou_report, ConfusionMatrix, IoUReport};
use crate::rng::{substream, substream2};
use crate::sampling::{
    adaptive_batch, build_epoch_plan, uniform_epoch, AdaptiveConfig, IoUState, RepeatFactorConfig, DEFAULT_CANDIDATES,
    DEFAULT_IOU_INIT, DEFAULT_SMOOTHING, DEFAULT_THRESHOLD, ZERO_FREQUENCY_CAP,
};
use crate::schedule::{lr_at, ScheduleConfig};
use crate::synth::{augment, load_sample, AugmentConfig, SynthRecord};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_FORMAT: &str = "imbalance-forge-checkpoint/1";
pub const METRICS_HEADER: &str = "epoch,lr,train_loss,miou,anat_miou,tool_miou,rare_miou";
/// One record in `HOLDOUT_MODULUS` goes to the validation split.
pub const HOLDOUT_MODULUS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    RepeatFactor,
    Adaptive,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "repeat_factor" => Ok(SamplerKind::RepeatFactor),
            "adaptive" => Ok(SamplerKind::Adaptive),
            other => Err(Error::validation(format!(
                "unknown sampler {other:?}; expected uniform, repeat_factor or adaptive"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_stages() -> usize {
    2
}
fn default_hidden() -> usize {
    32
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { stages: default_stages(), hidden: default_hidden(), activation: default_activation() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub sampler: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub seeds: Seeds,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_ohem_threshold")]
    pub ohem_threshold: f64,
    #[serde(default = "default_rf_threshold")]
    pub rf_threshold: f64,
    #[serde(default = "default_rare_threshold")]
    pub rare_threshold: f64,
    #[serde(default = "default_candidates")]
    pub adaptive_candidates: usize,
    #[serde(default = "default_smoothing")]
    pub iou_smoothing: f64,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Uniform
}
fn default_loss() -> LossKind {
    LossKind::Ce
}
fn default_batch_size() -> usize {
    8
}
fn default_epochs() -> usize {
    50
}
fn default_ohem_threshold() -> f64 {
    DEFAULT_OHEM_THRESHOLD
}
fn default_rf_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_rare_threshold() -> f64 {
    DEFAULT_RARE_THRESHOLD
}
fn default_candidates() -> usize {
    DEFAULT_CANDIDATES
}
fn default_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}

impl TrainConfig {
    pub fn new(seeds: Seeds) -> Self {
        Self {
            sampler: default_sampler(),
            loss: default_loss(),
            schedule: ScheduleConfig::default(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            augment: AugmentConfig::default(),
            seeds,
            model: ModelConfig::default(),
            ohem_threshold: default_ohem_threshold(),
            rf_threshold: default_rf_threshold(),
            rare_threshold: default_rare_threshold(),
            adaptive_candidates: default_candidates(),
            iou_smoothing: default_smoothing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.epochs > self.schedule.n {
            return Err(Error::validation(format!(
                "{} epochs exceed the schedule length n = {}",
                self.epochs, self.schedule.n
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(1..=2).contains(&self.model.stages) || self.model.hidden == 0 {
            return Err(Error::validation("model needs 1 or 2 stages and a positive hidden width"));
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return Err(Error::validation("ohem_threshold must be in (0,1]"));
        }
        if !(self.iou_smoothing > 0.0 && self.iou_smoothing <= 1.0) {
            return Err(Error::validation("iou_smoothing must be in (0,1]"));
        }
        if self.adaptive_candidates == 0 {
            return Err(Error::validation("adaptive_candidates must be at least 1"));
        }
        self.rf_config().validate()
    }

    fn rf_config(&self) -> RepeatFactorConfig {
        RepeatFactorConfig { t: self.rf_threshold, seed: self.seeds.sampler, zero_frequency_cap: ZERO_FREQUENCY_CAP }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Training setup used with [`crate::synth::long_tail_benchmark`]: 20
/// epochs of a single affine layer at lr0 = 1e-2, flips only.
pub fn benchmark_config(sampler: SamplerKind, loss: LossKind, seed: u64) -> TrainConfig {
    TrainConfig {
        sampler,
        loss,
        epochs: 20,
        schedule: ScheduleConfig { lr0: 1e-2, ..Default::default() },
        augment: AugmentConfig { flip: true, blur: false, jitter: false },
        model: ModelConfig { stages: 1, ..Default::default() },
        ..TrainConfig::new(Seeds { data: seed, model: seed, sampler: seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, F]`
    pub features: Tensor,
    pub labels: LabelMap,
}

/// Manifest plus the loaded samples, index-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, samples: Vec<Sample>) -> Result<Self> {
        if manifest.len() != samples.len() {
            return Err(Error::validation(format!(
                "{} manifest records but {} samples",
                manifest.len(),
                samples.len()
            )));
        }
        let shape = samples[0].features.shape().to_vec();
        for (stats, s) in manifest.records.iter().zip(&samples) {
            if s.features.shape() != shape.as_slice() || shape.len() != 3 {
                return Err(Error::shape(format!(
                    "record {}: features {:?}, expected {shape:?} like the first record",
                    stats.record_id,
                    s.features.shape()
                )));
            }
            if (s.labels.height(), s.labels.width()) != (shape[0], shape[1]) {
                return Err(Error::shape(format!("record {}: label map size differs from features", stats.record_id)));
            }
            let hist = s.labels.histogram(manifest.num_classes())?;
            if hist.iter().enumerate().any(|(c, &n)| stats.count(c) != n) {
                return Err(Error::validation(format!(
                    "record {}: manifest pixel counts differ from the label map",
                    stats.record_id
                )));
            }
        }
        Ok(Self { manifest, samples })
    }

    pub fn from_synth(records: Vec<SynthRecord>, manifest: DatasetManifest) -> Result<Self> {
        let samples = records.into_iter().map(|r| Sample { features: r.features, labels: r.labels }).collect();
        Self::new(manifest, samples)
    }

    /// Loads every record named in a manifest file; relative paths resolve
    /// against the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let samples = manifest
            .records
            .par_iter()
            .map(|stats| load_sample(root, stats).map(|(features, labels)| Sample { features, labels }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.shape()[2]
    }

    pub fn pixels_per_image(&self) -> usize {
        let s = self.samples[0].features.shape();
        s[0] * s[1]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let manifest = DatasetManifest::new(
            indices.iter().map(|&i| self.manifest.records[i].clone()).collect(),
            self.manifest.task.clone(),
        )?;
        Ok(Self { manifest, samples: indices.iter().map(|&i| self.samples[i].clone()).collect() })
    }
}

/// Records whose id hashes to 0 mod 5 are held out (about 20%).
pub fn is_holdout(record_id: &str) -> bool {
    let digest = Sha256::digest(record_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head) % HOLDOUT_MODULUS == 0
}

/// `(train, validation)` manifest indices.
pub fn holdout_split(manifest: &DatasetManifest) -> (Vec<usize>, Vec<usize>) {
    (0..manifest.len()).partition(|&i| !is_holdout(&manifest.records[i].record_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Anything that labels every pixel of an `[H, W, F]` feature tensor.
pub trait Segmenter: Sync {
    fn segment(&self, features: &Tensor) -> Result<LabelMap>;
}

impl ToyModel {
    /// Glorot-uniform weights from the `(seed, "init", layer)` substream, zero biases.
    pub fn init(cfg: &ModelConfig, in_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if !(1..=2).contains(&cfg.stages) || cfg.hidden == 0 || in_dim == 0 || num_classes == 0 {
            return Err(Error::validation("model needs 1 or 2 stages and positive dimensions"));
        }
        let dims: Vec<usize> = if cfg.stages == 1 {
            vec![in_dim, num_classes]
        } else {
            vec![in_dim, cfg.hidden, num_classes]
        };
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let mut rng = substream(seed, "init", k as u64);
                let a = (6.0 / (d[0] + d[1]) as f64).sqrt();
                Layer {
                    weight: Tensor::from_fn(&[d[0], d[1]], |_| rng.gen_range(-a..a)),
                    bias: Tensor::zeros(&[d[1]]),
                }
            })
            .collect();
        Ok(Self { layers, activation: cfg.activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Records the forward pass of `x: [N, F]`; returns the logits and the
    /// `(weight, bias)` variables of each layer.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<(Var, Vec<(Var, Var)>)> {
        let mut h = tape.constant(x);
        let mut vars = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            h = tape.linear(h, w, b)?;
            if k + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
            vars.push((w, b));
        }
        Ok((h, vars))
    }

    /// `[N, C]` logits for `[N, F]` inputs.
    pub fn logits(&self, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    fn flat_params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied())
    }

    pub fn save_checkpoint(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        blob::save_blob(path, header, self.flat_params())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, values): (CheckpointHeader, Vec<f32>) = blob::load_blob(path)?;
        if header.format != CHECKPOINT_FORMAT || header.dtype != blob::DTYPE {
            return Err(Error::validation(format!("{}: not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        let expected: usize = header.layers.iter().map(|l| l.weight[0] * l.weight[1] + l.bias).sum();
        if values.len() != expected {
            return Err(Error::validation(format!(
                "{}: {} parameters stored, header describes {expected}",
                path.display(),
                values.len()
            )));
        }
        let mut it = values.into_iter().map(f64::from);
        let mut layers = Vec::new();
        for shape in &header.layers {
            let weight = Tensor::new(shape.weight.to_vec(), it.by_ref().take(shape.weight[0] * shape.weight[1]).collect())?;
            let bias = Tensor::new(vec![shape.bias], it.by_ref().take(shape.bias).collect())?;
            layers.push(Layer { weight, bias });
        }
        Ok((Self { layers, activation: header.activation }, header))
    }
}

impl Segmenter for ToyModel {
    fn segment(&self, features: &Tensor) -> Result<LabelMap> {
        let (h, w, f) = match *features.shape() {
            [h, w, f] => (h, w, f),
            ref s => return Err(Error::shape(format!("expected [H, W, F] features, got {s:?}"))),
        };
        let logits = self.logits(features.clone().reshape(vec![h * w, f])?)?;
        LabelMap::new(h, w, logits.argmax_rows().into_iter().map(|c| c as u8).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub weight: [usize; 2],
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub dtype: String,
    pub activation: Activation,
    pub layers: Vec<LayerShape>,
    pub seeds: Seeds,
    pub config_hash: String,
    pub epoch: usize,
    pub miou: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &ToyModel) -> Self {
        let sizes: Vec<usize> = model.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
        Self { m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    /// `grads` in the order weight0, bias0, weight1, bias1, ...
    pub fn step(&mut self, model: &mut ToyModel, grads: &[&Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let params = model.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]);
        for (k, (p, g)) in params.zip(grads).enumerate() {
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Argmax predictions of every sample accumulated into one confusion matrix.
pub fn evaluate<S: Segmenter>(model: &S, data: &Dataset, rare: &BTreeSet<usize>) -> Result<IoUReport> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let c = data.manifest.num_classes();
    let cm = data
        .samples
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(c);
            cm.accumulate(&model.segment(&s.features)?, &s.labels)?;
            Ok::<_, Error>(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(c),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )?;
    iou_report(&cm, &data.manifest.task, rare)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub miou: f64,
    pub anat_miou: Option<f64>,
    pub tool_miou: Option<f64>,
    pub rare_miou: Option<f64>,
}

impl EpochLog {
    fn new(epoch: usize, lr: Option<f64>, train_loss: Option<f64>, report: &IoUReport) -> Self {
        Self {
            epoch,
            lr,
            train_loss,
            miou: report.miou,
            anat_miou: report.groups.anatomies,
            tool_miou: report.groups.instruments,
            rare_miou: report.groups.rare,
        }
    }

    /// CSV row; undefined values are empty cells.
    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            cell(self.lr),
            cell(self.train_loss),
            self.miou,
            cell(self.anat_miou),
            cell(self.tool_miou),
            cell(self.rare_miou)
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Row 0 is the evaluation before training.
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_report: IoUReport,
    pub best_model: ToyModel,
    pub final_model: ToyModel,
}

impl TrainSummary {
    pub fn best_miou(&self) -> f64 {
        self.best_report.miou
    }
}

struct Batch {
    x: Tensor,
    labels: Vec<u8>,
}

fn assemble(data: &Dataset, indices: &[usize], augment_cfg: &AugmentConfig, seed: u64, epoch: usize, offset: usize) -> Result<Batch> {
    let (ppi, f) = (data.pixels_per_image(), data.feature_dim());
    let mut x = Vec::with_capacity(indices.len() * ppi * f);
    let mut labels = Vec::with_capacity(indices.len() * ppi);
    for (k, &i) in indices.iter().enumerate() {
        let s = &data.samples[i];
        let mut rng = substream2(seed, "augment", epoch as u64, (offset + k) as u64);
        let (fx, fy) = augment(&s.features, &s.labels, augment_cfg, &mut rng)?;
        x.extend_from_slice(fx.data());
        labels.extend_from_slice(fy.data());
    }
    Ok(Batch { x: Tensor::new(vec![indices.len() * ppi, f], x)?, labels })
}

/// Per-class IoU of argmax `logits` against `labels`, for classes with a
/// non-empty union.
fn batch_iou(logits: &Tensor, labels: &[u8], num_classes: usize) -> Result<BTreeMap<usize, f64>> {
    let pred: Vec<u8> = logits.argmax_rows().into_iter().map(|c| c as u8).collect();
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate_slices(&pred, labels)?;
    Ok(cm
        .per_class_iou()
        .into_iter()
        .enumerate()
        .filter_map(|(c, v)| v.map(|v| (c, v)))
        .collect())
}

struct MetricsWriter(Option<File>);

impl MetricsWriter {
    fn create(out_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = out_dir else { return Ok(Self(None)) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self(Some(file)))
    }

    fn row(&mut self, row: &EpochLog) -> Result<()> {
        if let Some(file) = self.0.as_mut() {
            writeln!(file, "{}", row.csv_row())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io("metrics.csv", e))?;
        }
        Ok(())
    }
}

/// Trains on the non-held-out records of `data` and evaluates on the rest
/// after every epoch.
///
/// With `out_dir`, writes `metrics.csv` row by row, and at the end
/// `model.bin` (the best-mIoU parameters) and `report.json` (its report).
pub fn train(data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_idx, val_idx) = holdout_split(&data.manifest);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::validation(format!(
            "held-out split of {} records leaves {} for training and {} for validation",
            data.len(),
            train_idx.len(),
            val_idx.len()
        )));
    }
    let train_set = data.subset(&train_idx)?;
    let val_set = data.subset(&val_idx)?;
    let rare = rare_classes(&train_set.manifest, cfg.rare_threshold)?;
    let num_classes = data.manifest.num_classes();
    let ppi = data.pixels_per_image();

    let mut model = ToyModel::init(&cfg.model, data.feature_dim(), num_classes, cfg.seeds.model)?;
    let mut adam = Adam::new(&model);
    let mut writer = MetricsWriter::create(out_dir)?;

    let report = evaluate(&model, &val_set, &rare)?;
    let first = EpochLog::new(0, None, None, &report);
    writer.row(&first)?;
    let mut log = vec![first];
    let (mut best_epoch, mut best_report, mut best_model) = (0, report, model.clone());

    let acfg = AdaptiveConfig {
        batch_size: cfg.batch_size,
        candidates_per_slot: cfg.adaptive_candidates,
        seed: cfg.seeds.sampler,
    };
    let mut iou_state = IoUState::with_params(num_classes, cfg.iou_smoothing, DEFAULT_IOU_INIT);
    let mut adaptive_step = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.schedule, epoch)?;
        let planned: Option<Vec<usize>> = match cfg.sampler {
            SamplerKind::Uniform => Some(uniform_epoch(&train_set.manifest, cfg.seeds.sampler, epoch as u64).indices().collect()),
            SamplerKind::RepeatFactor => {
                Some(build_epoch_plan(&train_set.manifest, &cfg.rf_config(), epoch as u64)?.indices().collect())
            }
            SamplerKind::Adaptive => None,
        };
        let num_batches = match &planned {
            Some(p) => p.len().div_ceil(cfg.batch_size),
            None => train_set.len().div_ceil(cfg.batch_size),
        };

        let mut loss_sum = 0.0;
        for step in 0..num_batches {
            let indices: Vec<usize> = match &planned {
                Some(p) => p[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(p.len())].to_vec(),
                None => {
                    let b = adaptive_batch(&train_set.manifest, &iou_state, &acfg, adaptive_step)?;
                    adaptive_step += 1;
                    b.records
                }
            };
            let batch = assemble(&train_set, &indices, &cfg.augment, cfg.seeds.sampler, epoch, step * cfg.batch_size)?;

            let mut tape = Tape::new();
            let (logits, vars) = model.forward(&mut tape, batch.x)?;
            let out = batch_loss(cfg.loss, tape.value(logits), &batch.labels, ppi, cfg.ohem_threshold)?;
            if !out.value.is_finite() || !out.grad_logits.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: out.value });
            }
            if cfg.sampler == SamplerKind::Adaptive {
                iou_state.observe(&batch_iou(tape.value(logits), &batch.labels, num_classes)?)?;
            }
            let grads = tape.backward(logits, out.grad_logits)?;
            let ordered: Vec<&Tensor> = vars
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .map(|v| grads.get(v).ok_or_else(|| Error::shape("missing parameter gradient")))
                .collect::<Result<_>>()?;
            adam.step(&mut model, &ordered, lr);
            loss_sum += out.value;
        }

        let report = evaluate(&model, &val_set, &rare)?;
        let row = EpochLog::new(epoch + 1, Some(lr), Some(loss_sum / num_batches as f64), &report);
        writer.row(&row)?;
        log.push(row);
        if report.miou > best_report.miou {
            (best_epoch, best_report, best_model) = (epoch + 1, report, model.clone());
        }
        log::info!("epoch {}: lr {lr:e}, miou {:.4}", epoch + 1, log[epoch + 1].miou);
    }

    if let Some(dir) = out_dir {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            dtype: blob::DTYPE.into(),
            activation: best_model.activation,
            layers: best_model
                .layers
                .iter()
                .map(|l| LayerShape { weight: [l.weight.shape()[0], l.weight.shape()[1]], bias: l.bias.len() })
                .collect(),
            seeds: cfg.seeds,
            config_hash: cfg.hash()?,
            epoch: best_epoch,
            miou: best_report.miou,
        };
        best_model.save_checkpoint(&dir.join("model.bin"), &header)?;
        let path = dir.join("report.json");
        std::fs::write(&path, best_report.to_json()?).map_err(|e| Error::io(&path, e))?;
    }

    Ok(TrainSummary { log, best_epoch, best_report, best_model, final_model: model })
}

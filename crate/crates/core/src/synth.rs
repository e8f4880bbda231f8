//! Synthetic long-tail segmentation data and image augmentations.
//!
//! Each image starts as the background class. Every other class is included
//! independently with its target frequency and painted as one axis-aligned
//! rectangle, in config order, so later classes occlude earlier ones.
//! Features are `mean[label] + sigma * N(0, 1)` per pixel.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::labelmap::LabelMap;
use crate::manifest::{ClassGroup, ClassSpec, DatasetManifest, RecordStats, TaskId, TaskSpec};
use crate::rng::substream;

pub const MAX_RECT_ATTEMPTS: usize = 100;
pub const FLIP_PROB: f64 = 0.5;
pub const BLUR_PROB: f64 = 0.05;
pub const BLUR_KERNELS: [usize; 3] = [3, 5, 7];
pub const JITTER_RANGE: (f64, f64) = (2.0 / 3.0, 1.5);
pub const HUE_RANGE: f64 = 0.05;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub id: usize,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_group")]
    pub group: ClassGroup,
    pub target_frequency: f64,
    pub mean: Vec<f64>,
    pub region_scale: f64,
}

fn default_group() -> ClassGroup {
    ClassGroup::Instrument
}

fn default_task() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub background_class: usize,
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: String,
    pub classes: Vec<SynthClass>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 || self.height == 0 || self.width == 0 || self.feature_dim == 0 {
            return Err(Error::validation("num_images, height, width and feature_dim must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let bg = self
            .classes
            .get(self.background_class)
            .ok_or_else(|| Error::validation(format!("background class {} not defined", self.background_class)))?;
        if bg.target_frequency != 1.0 {
            return Err(Error::validation("background class must have target_frequency 1.0"));
        }
        for (i, class) in self.classes.iter().enumerate() {
            if class.id != i {
                return Err(Error::validation(format!("class ids must be 0..C in order, found {} at {i}", class.id)));
            }
            if !(class.target_frequency > 0.0 && class.target_frequency <= 1.0) {
                return Err(Error::validation(format!(
                    "class {i}: target_frequency must be in (0,1], got {}",
                    class.target_frequency
                )));
            }
            if class.mean.len() != self.feature_dim {
                return Err(Error::validation(format!(
                    "class {i}: mean has {} entries, feature_dim is {}",
                    class.mean.len(),
                    self.feature_dim
                )));
            }
            if !(class.region_scale > 0.0 && class.region_scale <= 1.0) {
                return Err(Error::validation(format!("class {i}: region_scale must be in (0,1]")));
            }
            if self.classes[..i].iter().any(|other| other.mean == class.mean) {
                return Err(Error::validation(format!("class {i}: mean vector duplicates an earlier class")));
            }
        }
        self.task_spec().map(|_| ())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let classes = self
            .classes
            .iter()
            .map(|c| ClassSpec {
                id: c.id,
                name: c.name.clone().unwrap_or_else(|| format!("class{}", c.id)),
                group: c.group,
            })
            .collect();
        TaskSpec::new(self.task.parse::<TaskId>()?, classes)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// The fixed 12-class long-tail benchmark: background, four anatomy-like
/// classes, one misc class, four instruments and three rare instruments at
/// f_c = 0.03 on 2,000 images of 32x32. Class c > 0 has mean `2 * e_c` in a
/// 12-dimensional feature space, background the zero vector.
pub fn long_tail_benchmark(seed: u64) -> SynthConfig {
    use ClassGroup::*;
    let spec: [(&str, ClassGroup, f64, f64); 12] = [
        ("background", Anatomy, 1.0, 1.0),
        ("anatomy1", Anatomy, 0.9, 0.3),
        ("anatomy2", Anatomy, 0.7, 0.2),
        ("anatomy3", Anatomy, 0.5, 0.15),
        ("misc", Misc, 0.4, 0.1),
        ("tool1", Instrument, 0.5, 0.08),
        ("tool2", Instrument, 0.35, 0.06),
        ("tool3", Instrument, 0.25, 0.06),
        ("tool4", Instrument, 0.15, 0.05),
        ("rare1", Instrument, 0.03, 0.05),
        ("rare2", Instrument, 0.03, 0.05),
        ("rare3", Instrument, 0.03, 0.05),
    ];
    SynthConfig {
        num_images: 2000,
        height: 32,
        width: 32,
        feature_dim: 12,
        noise_sigma: 0.9,
        background_class: 0,
        seed,
        task: "longtail12".into(),
        classes: spec
            .iter()
            .enumerate()
            .map(|(id, &(name, group, f, scale))| SynthClass {
                id,
                name: Some(name.into()),
                group,
                target_frequency: f,
                mean: (0..12).map(|k| if k == id && id > 0 { 2.0 } else { 0.0 }).collect(),
                region_scale: scale,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    /// `[H, W, F]`
    pub features: Tensor,
    pub labels: LabelMap,
    pub stats: RecordStats,
}

pub fn record_id(index: usize) -> String {
    format!("img{index:05}")
}

/// Top-left corner and size of a rectangle with area close to `scale * H * W`.
fn draw_rect(rng: &mut impl Rng, height: usize, width: usize, scale: f64) -> Result<(usize, usize, usize, usize)> {
    let area = scale * (height * width) as f64;
    for _ in 0..MAX_RECT_ATTEMPTS {
        let aspect: f64 = (rng.gen::<f64>() * 2.0 - 1.0) * std::f64::consts::LN_2;
        let aspect = aspect.exp();
        let w = ((area * aspect).sqrt().round() as usize).min(width);
        let h = ((area / aspect).sqrt().round() as usize).min(height);
        if w == 0 || h == 0 {
            continue;
        }
        let top = rng.gen_range(0..=height - h);
        let left = rng.gen_range(0..=width - w);
        return Ok((top, left, h, w));
    }
    Err(Error::validation(format!(
        "could not draw a non-empty rectangle of scale {scale} on {height}x{width} in {MAX_RECT_ATTEMPTS} attempts"
    )))
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Result<SynthRecord> {
    let mut rng = substream(cfg.seed, "synth", index as u64);
    let (h, w, f) = (cfg.height, cfg.width, cfg.feature_dim);
    let mut labels = LabelMap::filled(h, w, cfg.background_class as u8);
    for class in &cfg.classes {
        if class.id == cfg.background_class {
            continue;
        }
        if rng.gen::<f64>() >= class.target_frequency {
            continue;
        }
        let (top, left, rh, rw) = draw_rect(&mut rng, h, w, class.region_scale)?;
        for row in top..top + rh {
            for col in left..left + rw {
                labels.set(row, col, class.id as u8);
            }
        }
    }
    let mut data = Vec::with_capacity(h * w * f);
    for &label in labels.data() {
        for &mu in &cfg.classes[label as usize].mean {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + cfg.noise_sigma * z);
        }
    }
    let features = Tensor::new(vec![h, w, f], data)?;
    let stats = RecordStats::from_labels(record_id(index), &labels, cfg.num_classes())?;
    Ok(SynthRecord { features, labels, stats })
}

/// Generates every image from its own `(seed, index)` substream, so the
/// result does not depend on thread count.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Vec<SynthRecord>, DatasetManifest)> {
    cfg.validate()?;
    let records: Vec<SynthRecord> = (0..cfg.num_images)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest::new(records.iter().map(|r| r.stats.clone()).collect(), cfg.task_spec()?)?;
    Ok((records, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// Writes `labels/<id>.pgm`, `features/<id>.bin` and `manifest.jsonl` under
/// `dir`. Paths inside the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, records: &[SynthRecord], manifest: &DatasetManifest) -> Result<DatasetManifest> {
    for sub in ["labels", "features"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut out = manifest.clone();
    for (record, stats) in records.iter().zip(out.records.iter_mut()) {
        let label_rel = PathBuf::from("labels").join(format!("{}.pgm", stats.record_id));
        let feat_rel = PathBuf::from("features").join(format!("{}.bin", stats.record_id));
        record.labels.save_pgm(&dir.join(&label_rel))?;
        let header = FeatureHeader { shape: record.features.shape().to_vec(), dtype: blob::DTYPE.into() };
        blob::save_blob(&dir.join(&feat_rel), &header, record.features.data().iter().copied())?;
        stats.label_path = Some(label_rel);
        stats.image_path = Some(feat_rel);
    }
    out.save(&dir.join("manifest.jsonl"))?;
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let (header, values): (FeatureHeader, Vec<f32>) = blob::load_blob(path)?;
    if header.dtype != blob::DTYPE || header.shape.len() != 3 {
        return Err(Error::validation(format!(
            "{}: expected a rank-3 {} feature blob",
            path.display(),
            blob::DTYPE
        )));
    }
    Tensor::new(header.shape, values.into_iter().map(f64::from).collect())
}

/// Loads the features and labels of one manifest record; relative paths
/// resolve against `root`.
pub fn load_sample(root: &Path, stats: &RecordStats) -> Result<(Tensor, LabelMap)> {
    let resolve = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::validation(format!("record {} has no {what} path", stats.record_id)))?;
        Ok(if p.is_absolute() { p.clone() } else { root.join(p) })
    };
    let features = load_features(&resolve(&stats.image_path, "image")?)?;
    let labels = LabelMap::load_pgm(&resolve(&stats.label_path, "label")?)?;
    if features.shape()[..2] != [labels.height(), labels.width()] {
        return Err(Error::shape(format!(
            "record {}: features {:?} do not match labels {}x{}",
            stats.record_id,
            features.shape(),
            labels.height(),
            labels.width()
        )));
    }
    if (labels.height(), labels.width()) != (stats.height, stats.width) {
        return Err(Error::validation(format!("record {}: label map size differs from manifest", stats.record_id)));
    }
    Ok((features, labels))
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(format!("expected an [H, W, C] image, got {s:?}"))),
    }
}

/// Mirrors features and labels along the width axis.
pub fn hflip(features: &Tensor, labels: &LabelMap) -> Result<(Tensor, LabelMap)> {
    let (h, w, c) = dims(features)?;
    if (h, w) != (labels.height(), labels.width()) {
        return Err(Error::shape(format!("features {h}x{w} vs labels {}x{}", labels.height(), labels.width())));
    }
    let src = features.data();
    let flipped = Tensor::from_fn(&[h, w, c], |i| {
        let (row, rest) = (i / (w * c), i % (w * c));
        let (col, ch) = (rest / c, rest % c);
        src[(row * w + (w - 1 - col)) * c + ch]
    });
    Ok((flipped, labels.hflip()))
}

pub fn blur_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_kernel(kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::validation(format!("blur kernel size must be odd, got {kernel_size}")));
    }
    let sigma = blur_sigma(kernel_size);
    let r = (kernel_size / 2) as f64;
    let raw: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Reflect padding without repeating the edge sample (`d c b | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur of an `[H, W, C]` image.
pub fn gaussian_blur(image: &Tensor, kernel_size: usize) -> Result<Tensor> {
    let kernel = gaussian_kernel(kernel_size)?;
    let (h, w, c) = dims(image)?;
    let r = (kernel_size / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let cc = reflect(col as isize + k as isize - r, w);
                    acc += wt * src[(row * w + cc) * c + ch];
                }
                tmp[(row * w + col) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let rr = reflect(row as isize + k as isize - r, h);
                    acc += wt * tmp[(rr * w + col) * c + ch];
                }
                out[(row * w + col) * c + ch] = acc;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: Self = Self { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };

    pub fn draw(rng: &mut impl Rng) -> Self {
        let (lo, hi) = JITTER_RANGE;
        Self {
            brightness: rng.gen_range(lo..=hi),
            contrast: rng.gen_range(lo..=hi),
            saturation: rng.gen_range(lo..=hi),
            hue: rng.gen_range(-HUE_RANGE..=HUE_RANGE),
        }
    }
}

fn luma(px: &[f64]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

fn rgb_to_hsv(px: &[f64]) -> [f64; 3] {
    let (r, g, b) = (px[0], px[1], px[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, then contrast, then saturation, then hue, clamping to [0, 1]
/// after each step. Inputs are clamped to [0, 1] first.
pub fn color_jitter(image: &Tensor, f: &JitterFactors) -> Result<Tensor> {
    let (h, w, c) = dims(image)?;
    if c != 3 {
        return Err(Error::shape(format!("color jitter needs 3 channels, got {c}")));
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let mut px: Vec<f64> = image.data().iter().map(|&v| clamp(v)).collect();
    px.iter_mut().for_each(|v| *v = clamp(*v * f.brightness));

    let mean_gray = px.chunks_exact(3).map(luma).sum::<f64>() / (h * w) as f64;
    px.iter_mut().for_each(|v| *v = clamp(mean_gray + (*v - mean_gray) * f.contrast));

    for p in px.chunks_exact_mut(3) {
        let gray = luma(p);
        p.iter_mut().for_each(|v| *v = clamp(gray + (*v - gray) * f.saturation));
    }

    if f.hue != 0.0 {
        for p in px.chunks_exact_mut(3) {
            let [hh, s, v] = rgb_to_hsv(p);
            let rgb = hsv_to_rgb([hh + f.hue, s, v]);
            for (dst, src) in p.iter_mut().zip(rgb) {
                *dst = clamp(src);
            }
        }
    }
    Tensor::new(vec![h, w, 3], px)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub blur: bool,
    #[serde(default)]
    pub jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, blur: true, jitter: false }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self { flip: false, blur: false, jitter: false };
}

/// Applies the enabled augmentations: flip with probability 0.5, blur with
/// probability 0.05 and a kernel from {3, 5, 7}, then color jitter.
pub fn augment(features: &Tensor, labels: &LabelMap, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor, LabelMap)> {
    let mut x = features.clone();
    let mut y = labels.clone();
    if cfg.flip && rng.gen::<f64>() < FLIP_PROB {
        (x, y) = hflip(&x, &y)?;
    }
    if cfg.blur && rng.gen::<f64>() < BLUR_PROB {
        let k = BLUR_KERNELS[rng.gen_range(0..BLUR_KERNELS.len())];
        x = gaussian_blur(&x, k)?;
    }
    if cfg.jitter {
        x = color_jitter(&x, &JitterFactors::draw(rng))?;
    }
    Ok((x, y))
}

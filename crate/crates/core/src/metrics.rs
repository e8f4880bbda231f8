//! Dataset-level IoU from a confusion matrix, grouped means, and ensembling
//! of per-model probability maps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::labelmap::{LabelMap, IGNORE};
use crate::manifest::{ClassGroup, TaskSpec};

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        self.accumulate_slices(pred.data(), gt.data())
    }

    /// Same as [`accumulate`](Self::accumulate) on flat label slices.
    pub fn accumulate_slices(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        let c = self.num_classes;
        // validate first so a failed call leaves the matrix untouched
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= c {
                return Err(Error::validation(format!("predicted class {p} outside {c} classes")));
            }
            if g != IGNORE && g as usize >= c {
                return Err(Error::validation(format!("ground-truth class {g} outside {c} classes")));
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE {
                self.counts[g as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class is absent from
    /// both prediction and ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub anatomies: Option<f64>,
    pub instruments: Option<f64>,
    pub rare: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub groups: GroupMeans,
    pub undefined_classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    per_class: BTreeMap<String, Option<f64>>,
    miou: f64,
    groups: GroupMeans,
    undefined_classes: Vec<usize>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl IoUReport {
    pub fn to_json(&self) -> Result<String> {
        let file = ReportFile {
            per_class: self.per_class.iter().enumerate().map(|(c, v)| (c.to_string(), *v)).collect(),
            miou: self.miou,
            groups: self.groups.clone(),
            undefined_classes: self.undefined_classes.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

pub fn iou_report(cm: &ConfusionMatrix, task: &TaskSpec, rare: &BTreeSet<usize>) -> Result<IoUReport> {
    if cm.num_classes() != task.num_classes() {
        return Err(Error::shape(format!(
            "confusion matrix has {} classes, task {} has {}",
            cm.num_classes(),
            task.task_id,
            task.num_classes()
        )));
    }
    let per_class = cm.per_class_iou();
    let miou = mean_defined(per_class.iter().copied())
        .ok_or_else(|| Error::validation("no class is defined in the confusion matrix"))?;
    let group = |g: ClassGroup| mean_defined(task.class_ids_in(g).into_iter().map(|c| per_class[c]));
    let groups = GroupMeans {
        anatomies: group(ClassGroup::Anatomy),
        instruments: group(ClassGroup::Instrument),
        rare: mean_defined(rare.iter().filter(|&&c| c < per_class.len()).map(|&c| per_class[c])),
    };
    let undefined_classes = (0..per_class.len()).filter(|&c| per_class[c].is_none()).collect();
    Ok(IoUReport {
        per_class,
        miou,
        groups,
        undefined_classes,
    })
}

/// Class probabilities of shape `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor);

#[derive(Serialize, Deserialize)]
struct ProbMapHeader {
    shape: Vec<usize>,
    dtype: String,
}

impl ProbMap {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::shape(format!("probability map must be [C,H,W], got {:?}", tensor.shape())));
        }
        let map = Self(tensor);
        map.check_normalized()?;
        Ok(map)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    fn check_normalized(&self) -> Result<()> {
        let (c, h, w) = self.shape();
        let plane = h * w;
        let data = self.0.data();
        for px in 0..plane {
            let sum: f64 = (0..c).map(|k| data[k * plane + px]).sum();
            if !((sum - 1.0).abs() <= Self::SUM_TOLERANCE) || (0..c).any(|k| data[k * plane + px] < 0.0) {
                return Err(Error::validation(format!(
                    "pixel {px} class probabilities sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// Highest-probability class per pixel; first class wins ties.
    pub fn argmax(&self) -> LabelMap {
        let (c, h, w) = self.shape();
        let plane = h * w;
        let data = self.0.data();
        let labels = (0..plane)
            .map(|px| {
                let mut best = 0;
                for k in 1..c {
                    if data[k * plane + px] > data[best * plane + px] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, labels).expect("non-empty plane")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ProbMapHeader {
            shape: self.0.shape().to_vec(),
            dtype: blob::DTYPE.into(),
        };
        blob::save_blob(path, &header, self.0.data().iter().copied())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, values): (ProbMapHeader, _) = blob::load_blob(path)?;
        if header.dtype != blob::DTYPE {
            return Err(Error::validation(format!("{}: unsupported dtype {}", path.display(), header.dtype)));
        }
        let data = values.into_iter().map(f64::from).collect();
        Self::new(Tensor::new(header.shape, data)?)
    }
}

/// Pixelwise arithmetic mean of probability maps.
pub fn ensemble_mean(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::validation("ensemble needs at least one map"))?;
    for m in &maps[1..] {
        if m.0.shape() != first.0.shape() {
            return Err(Error::shape(format!(
                "ensemble members differ in shape: {:?} vs {:?}",
                first.0.shape(),
                m.0.shape()
            )));
        }
    }
    for m in maps {
        m.check_normalized()?;
    }
    let k = maps.len() as f64;
    let mut out = vec![0.0; first.0.len()];
    for m in maps {
        for (o, v) in out.iter_mut().zip(m.0.data()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= k;
    }
    ProbMap::new(Tensor::new(first.0.shape().to_vec(), out)?)
}

//! Segmentation losses over per-pixel logits `[N, C]` with analytic gradients.
//!
//! Labels are flat `u8` slices of length N; [`IGNORE`] pixels contribute
//! neither value nor gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{grad_check, softmax, softmax_backward, Tensor};
use crate::error::{Error, Result};
use crate::labelmap::IGNORE;
use crate::rng::substream;

/// Correct-class probability above which OHEM drops a pixel.
pub const DEFAULT_OHEM_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Tensor,
}

impl LossOutput {
    fn zero(shape: &[usize]) -> Self {
        Self {
            value: 0.0,
            grad_logits: Tensor::zeros(shape),
        }
    }
}

fn check_inputs(logits: &Tensor, labels: &[u8]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::shape(format!("logits must be [N, C], got {:?}", logits.shape())));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= c) {
        return Err(Error::validation(format!("label {bad} outside {c} classes")));
    }
    Ok((n, c))
}

/// Mean negative log-likelihood over the kept pixels; `keep` sees the
/// correct-class probability.
fn masked_cross_entropy(logits: &Tensor, labels: &[u8], keep: impl Fn(f64) -> bool) -> Result<LossOutput> {
    let (_, c) = check_inputs(logits, labels)?;
    let probs = softmax(logits);
    let mut kept = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != IGNORE && keep(probs.row(i)[l as usize]) {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Ok(LossOutput::zero(logits.shape()));
    }
    let scale = 1.0 / kept.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for &i in &kept {
        let row = logits.row(i);
        let label = labels[i] as usize;
        // -log softmax via log-sum-exp
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (gj, pj) in g.iter_mut().zip(probs.row(i)) {
            *gj = pj * scale;
        }
        g[label] -= scale;
    }
    Ok(LossOutput {
        value: total * scale,
        grad_logits: grad,
    })
}

pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<LossOutput> {
    masked_cross_entropy(logits, labels, |_| true)
}

/// Cross-entropy restricted to pixels whose correct-class probability is at
/// most `threshold`.
pub fn ohem_cross_entropy(logits: &Tensor, labels: &[u8], threshold: f64) -> Result<LossOutput> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::validation(format!("OHEM threshold must be in (0,1], got {threshold}")));
    }
    masked_cross_entropy(logits, labels, |p| p <= threshold)
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order. `None` when no pixel is foreground.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Option<Vec<f64>> {
    let positives = gt_sorted.iter().filter(|&&g| g).count() as f64;
    if positives == 0.0 {
        return None;
    }
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut fg_seen, mut bg_seen) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            fg_seen += 1.0;
        } else {
            bg_seen += 1.0;
        }
        let intersection = positives - fg_seen;
        let union = positives + bg_seen;
        let jacc = 1.0 - intersection / union;
        grad.push(jacc - prev);
        prev = jacc;
    }
    Some(grad)
}

/// Lovász-Softmax on probabilities of a single image. Returns the value and
/// the gradient with respect to `probs`.
pub fn lovasz_softmax_probs(probs: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let (n, c) = check_inputs(probs, labels)?;
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE).collect();
    let mut grad = Tensor::zeros(probs.shape());
    let mut present = 0usize;
    let mut total = 0.0;
    let mut errors = Vec::with_capacity(valid.len());
    let mut order: Vec<usize> = Vec::with_capacity(valid.len());
    let mut gt_sorted = Vec::with_capacity(valid.len());
    for class in 0..c {
        if !valid.iter().any(|&i| labels[i] as usize == class) {
            continue;
        }
        present += 1;
        errors.clear();
        errors.extend(valid.iter().map(|&i| {
            let p = probs.row(i)[class];
            if labels[i] as usize == class {
                1.0 - p
            } else {
                p
            }
        }));
        order.clear();
        order.extend(0..valid.len());
        // descending error; equal errors keep pixel order
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        gt_sorted.clear();
        gt_sorted.extend(order.iter().map(|&k| labels[valid[k]] as usize == class));
        let weights = lovasz_grad(&gt_sorted).expect("class is present");
        for (&k, &w) in order.iter().zip(&weights) {
            total += errors[k] * w;
        }
        // d error / d p is -1 on foreground pixels, +1 elsewhere
        for (&k, &w) in order.iter().zip(&weights) {
            let i = valid[k];
            let sign = if labels[i] as usize == class { -1.0 } else { 1.0 };
            grad.data_mut()[i * c + class] += sign * w;
        }
    }
    if present == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / present as f64;
    for g in grad.data_mut() {
        *g *= scale;
    }
    Ok((total * scale, grad))
}

/// Lovász-Softmax over the logits of a single image, averaged over the
/// classes present in its labels.
pub fn lovasz_softmax(logits: &Tensor, labels: &[u8]) -> Result<LossOutput> {
    check_inputs(logits, labels)?;
    let probs = softmax(logits);
    let (value, grad_probs) = lovasz_softmax_probs(&probs, labels)?;
    Ok(LossOutput {
        value,
        grad_logits: softmax_backward(&probs, &grad_probs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Ohem,
    Lovasz,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "ohem" => Ok(LossKind::Ohem),
            "lovasz" => Ok(LossKind::Lovasz),
            other => Err(Error::validation(format!("unknown loss {other:?}; expected ce, ohem or lovasz"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::Ohem => "ohem",
            LossKind::Lovasz => "lovasz",
        })
    }
}

/// Loss over a batch of images stacked along N, `pixels_per_image` rows each.
///
/// Cross-entropy variants average over all kept pixels of the batch; Lovász
/// is computed per image and averaged over images with at least one labelled
/// pixel.
pub fn batch_loss(kind: LossKind, logits: &Tensor, labels: &[u8], pixels_per_image: usize, ohem_threshold: f64) -> Result<LossOutput> {
    match kind {
        LossKind::Ce => cross_entropy(logits, labels),
        LossKind::Ohem => ohem_cross_entropy(logits, labels, ohem_threshold),
        LossKind::Lovasz => {
            let (n, c) = check_inputs(logits, labels)?;
            if pixels_per_image == 0 || n % pixels_per_image != 0 {
                return Err(Error::shape(format!("{n} pixels do not split into images of {pixels_per_image}")));
            }
            let mut grad = vec![0.0; n * c];
            let mut total = 0.0;
            let mut images = 0usize;
            for (img, (rows, labs)) in logits
                .data()
                .chunks(pixels_per_image * c)
                .zip(labels.chunks(pixels_per_image))
                .enumerate()
            {
                if labs.iter().all(|&l| l == IGNORE) {
                    continue;
                }
                let part = Tensor::new(vec![pixels_per_image, c], rows.to_vec())?;
                let out = lovasz_softmax(&part, labs)?;
                total += out.value;
                images += 1;
                grad[img * pixels_per_image * c..(img + 1) * pixels_per_image * c].copy_from_slice(out.grad_logits.data());
            }
            if images == 0 {
                return Ok(LossOutput::zero(logits.shape()));
            }
            let scale = 1.0 / images as f64;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            Ok(LossOutput {
                value: total * scale,
                grad_logits: Tensor::new(logits.shape().to_vec(), grad)?,
            })
        }
    }
}

/// Random logits `[N, C]` (N <= 64, 2 <= C <= 5) and labels with about 10%
/// ignored pixels, redrawn until a central difference cannot cross a kink:
/// OHEM instances keep every correct-class probability 1e-3 away from the
/// default threshold, Lovász instances keep per-class errors 1e-4 apart.
pub fn random_instance(rng: &mut impl Rng, kind: LossKind) -> (Tensor, Vec<u8>) {
    loop {
        let (n, c) = (rng.gen_range(1..=64), rng.gen_range(2..=5));
        let x = Tensor::from_fn(&[n, c], |_| rng.gen_range(-3.0..3.0));
        let labels: Vec<u8> = (0..n)
            .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..c) as u8 })
            .collect();
        let p = softmax(&x);
        let ok = match kind {
            LossKind::Ce => true,
            LossKind::Ohem => labels
                .iter()
                .enumerate()
                .all(|(i, &l)| l == IGNORE || (p.row(i)[l as usize] - DEFAULT_OHEM_THRESHOLD).abs() > 1e-3),
            LossKind::Lovasz => (0..c).all(|class| {
                let mut e: Vec<f64> = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l != IGNORE)
                    .map(|(i, &l)| {
                        let q = p.row(i)[class];
                        if l as usize == class { 1.0 - q } else { q }
                    })
                    .collect();
                e.sort_by(f64::total_cmp);
                e.windows(2).all(|w| w[1] - w[0] > 1e-4)
            }),
        };
        if ok {
            return (x, labels);
        }
    }
}

/// Largest relative analytic-vs-central-difference error of `kind` over
/// `trials` random instances drawn from the `(seed, "grad-check")` stream.
pub fn max_gradient_error(kind: LossKind, trials: usize, eps: f64, seed: u64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::validation(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut rng = substream(seed, "grad-check", kind as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (x, labels) = random_instance(&mut rng, kind);
        let n = x.shape()[0];
        let f = |p: &Tensor| {
            let out = batch_loss(kind, p, &labels, n, DEFAULT_OHEM_THRESHOLD)?;
            Ok((out.value, out.grad_logits))
        };
        worst = worst.max(grad_check(f, &x, eps)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let uniform = cross_entropy(&logits(&[&[0.0; 4]]), &[2]).unwrap();
        assert!((uniform.value - 4f64.ln()).abs() < 1e-15);
        assert!((uniform.value - 1.3863).abs() < 1e-4);

        let confident = cross_entropy(&logits(&[&[60.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(confident.value >= 0.0 && confident.value < 1e-20);

        let ignored = cross_entropy(&logits(&[&[1.0, 2.0], &[3.0, 4.0]]), &[IGNORE, IGNORE]).unwrap();
        assert_eq!(ignored.value, 0.0);
        assert!(ignored.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_ignores_void_pixels_in_mean() {
        let x = logits(&[&[0.0; 4], &[9.0, -3.0, 1.0, 0.0]]);
        let out = cross_entropy(&x, &[1, IGNORE]).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-15);
        assert!(out.grad_logits.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_validation() {
        let x = logits(&[&[0.0, 1.0]]);
        assert!(cross_entropy(&x, &[2]).is_err());
        assert!(cross_entropy(&x, &[0, 1]).is_err());
        assert!(ohem_cross_entropy(&x, &[0], 0.0).is_err());
        assert!(ohem_cross_entropy(&x, &[0], 1.5).is_err());
        assert!(lovasz_softmax(&x, &[3]).is_err());
    }

    #[test]
    fn ohem_examples() {
        let easy = logits(&[&[0.8f64.ln(), 0.2f64.ln()]]);
        let out = ohem_cross_entropy(&easy, &[0], 0.7).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_logits.data().iter().all(|&g| g == 0.0));

        let hard = logits(&[&[0.6f64.ln(), 0.4f64.ln()]]);
        let out = ohem_cross_entropy(&hard, &[0], 0.7).unwrap();
        assert!((out.value + 0.6f64.ln()).abs() < 1e-12);
        assert!((out.value - 0.5108).abs() < 1e-4);

        // mixed: only the hard pixel counts, mean over one pixel
        let mixed = logits(&[&[0.8f64.ln(), 0.2f64.ln()], &[0.6f64.ln(), 0.4f64.ln()]]);
        let out = ohem_cross_entropy(&mixed, &[0, 0], 0.7).unwrap();
        assert!((out.value + 0.6f64.ln()).abs() < 1e-12);
        assert!(out.grad_logits.row(0).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ohem_keep_all_is_cross_entropy_bitwise() {
        let mut rng = substream(8, "ohem-eq", 0);
        for _ in 0..100 {
            let (n, c) = (rng.gen_range(1..40), rng.gen_range(2..6));
            let x = Tensor::from_fn(&[n, c], |_| rng.gen_range(-8.0..8.0));
            let labels: Vec<u8> = (0..n)
                .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..c) as u8 })
                .collect();
            let a = cross_entropy(&x, &labels).unwrap();
            let b = ohem_cross_entropy(&x, &labels, 1.0).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert!(a.grad_logits.data().iter().zip(b.grad_logits.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn lovasz_grad_examples() {
        assert_eq!(lovasz_grad(&[true]).unwrap(), vec![1.0]);
        assert_eq!(lovasz_grad(&[true, true]).unwrap(), vec![0.5, 0.5]);
        for n in 1..20 {
            let g = lovasz_grad(&vec![true; n]).unwrap();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(lovasz_grad(&[false, false]).is_none());
        assert!(lovasz_grad(&[]).is_none());
    }

    #[test]
    fn lovasz_grad_nonnegative_and_telescopes() {
        let mut rng = substream(9, "lovasz-grad", 0);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let mut gt: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            gt[rng.gen_range(0..n)] = true;
            let g = lovasz_grad(&gt).unwrap();
            assert!(g.iter().all(|&v| v >= 0.0));
            // jacc_n: everything ranked, intersection 0 -> 1
            let p = gt.iter().filter(|&&b| b).count() as f64;
            let bg = n as f64 - p;
            let jacc_n = 1.0 - 0.0 / (p + bg);
            assert!((g.iter().sum::<f64>() - jacc_n).abs() < 1e-12);
        }
    }

    #[test]
    fn lovasz_examples() {
        let one_hot = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let (v, _) = lovasz_softmax_probs(&one_hot, &[0, 1, 0]).unwrap();
        assert_eq!(v, 0.0);

        // single pixel, true-class probability 0.3
        let x = logits(&[&[0.3f64.ln(), 0.7f64.ln()]]);
        let out = lovasz_softmax(&x, &[0]).unwrap();
        assert!((out.value - 0.7).abs() < 1e-12);

        let none = lovasz_softmax(&x, &[IGNORE]).unwrap();
        assert_eq!(none.value, 0.0);
        assert!(none.grad_logits.data().iter().all(|&g| g == 0.0));
    }

    /// Brute-force Jaccard loss averaged over classes present in `gt`.
    fn jaccard_oracle(pred: &[u8], gt: &[u8], c: usize) -> f64 {
        let mut losses = Vec::new();
        for class in 0..c as u8 {
            let a: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == class).collect();
            if a.is_empty() {
                continue;
            }
            let b: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
            let inter = a.iter().filter(|i| b.contains(i)).count();
            let union = a.len() + b.len() - inter;
            losses.push(1.0 - inter as f64 / union as f64);
        }
        losses.iter().sum::<f64>() / losses.len() as f64
    }

    #[test]
    fn lovasz_on_hard_predictions_is_jaccard_loss() {
        let mut rng = substream(10, "hard", 0);
        for _ in 0..300 {
            let (n, c) = (16, rng.gen_range(2..5));
            let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
            let probs = Tensor::from_fn(&[n, c], |k| f64::from(pred[k / c] as usize == k % c));
            let (v, _) = lovasz_softmax_probs(&probs, &gt).unwrap();
            assert!((v - jaccard_oracle(&pred, &gt, c)).abs() < 1e-12);
        }
    }

    /// Random logits/labels away from sort ties and the OHEM threshold.
    #[test]
    fn gradients_match_finite_differences() {
        for kind in [LossKind::Ce, LossKind::Ohem, LossKind::Lovasz] {
            let mut rng = substream(12, "fd", kind as u64);
            for trial in 0..100 {
                let (x, labels) = random_instance(&mut rng, kind);
                let n = x.shape()[0];
                let f = |p: &Tensor| {
                    let out = batch_loss(kind, p, &labels, n, DEFAULT_OHEM_THRESHOLD)?;
                    Ok((out.value, out.grad_logits))
                };
                let err = grad_check(f, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "{kind} trial {trial}: {err}");
            }
            assert!(max_gradient_error(kind, 20, 1e-5, 3).unwrap() < 1e-4);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = substream(13, "rows", 0);
        for kind in [LossKind::Ce, LossKind::Ohem, LossKind::Lovasz] {
            for _ in 0..50 {
                let (x, labels) = random_instance(&mut rng, kind);
                let n = x.shape()[0];
                let out = batch_loss(kind, &x, &labels, n, DEFAULT_OHEM_THRESHOLD).unwrap();
                assert!(out.value.is_finite() && out.value >= 0.0);
                for row in out.grad_logits.data().chunks(x.shape()[1]) {
                    assert!(row.iter().sum::<f64>().abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn lovasz_batch_averages_per_image() {
        let a = logits(&[&[0.3f64.ln(), 0.7f64.ln()], &[0.0, 0.0]]);
        let both = Tensor::new(vec![4, 2], [a.data(), a.data()].concat()).unwrap();
        let single = batch_loss(LossKind::Lovasz, &a, &[0, 1], 2, 0.7).unwrap();
        let pair = batch_loss(LossKind::Lovasz, &both, &[0, 1, IGNORE, IGNORE], 2, 0.7).unwrap();
        // the all-ignore image does not dilute the mean
        assert!((pair.value - single.value).abs() < 1e-15);
        assert!(batch_loss(LossKind::Lovasz, &both, &[0, 1, 0, 1], 3, 0.7).is_err());
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("lovasz".parse::<LossKind>().unwrap(), LossKind::Lovasz);
        assert!("focal".parse::<LossKind>().is_err());
        assert_eq!(serde_json::to_string(&LossKind::Ohem).unwrap(), "\"ohem\"");
    }
}

//! Dense f64 tensors and a small reverse-mode tape.
//!
//! The tape records primitive operations in execution order; `backward`
//! walks it once in reverse, accumulating gradients per node. Only the
//! primitives the toy classifier and the losses need are provided, and the
//! only broadcast is the bias row in [`Tape::linear`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()]).expect("positive extents")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Index of the largest entry of every trailing-axis slice; first wins on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.data
            .chunks(self.last_dim())
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-wise softmax over the trailing axis, max-subtracted.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.last_dim();
    let mut out = logits.data.clone();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Vector-Jacobian product of softmax: `dx = y * (g - <y, g>)` per row.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let c = probs.last_dim();
    let mut out = vec![0.0; probs.len()];
    for ((y, g), dx) in probs
        .data
        .chunks(c)
        .zip(grad_probs.data.chunks(c))
        .zip(out.chunks_mut(c))
    {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx[j] = y[j] * (g[j] - dot);
        }
    }
    Tensor {
        shape: probs.shape.clone(),
        data: out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Linear { x: Var, w: Var, b: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    Square { x: Var },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// A leaf whose gradient is never computed (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `out[n,c] = sum_f x[n,f] * w[f,c] + b[c]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape.len() != 2 || wv.shape.len() != 2 || bv.shape.len() != 1 {
            return Err(Error::shape(format!(
                "linear expects x[N,F], w[F,C], b[C]; got {:?}, {:?}, {:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        let (n, f) = (xv.shape[0], xv.shape[1]);
        let c = wv.shape[1];
        if wv.shape[0] != f || bv.shape[0] != c {
            return Err(Error::shape(format!(
                "linear: x{:?} w{:?} b{:?} do not conform",
                xv.shape, wv.shape, bv.shape
            )));
        }
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend_from_slice(&bv.data);
            let row = &mut out[i * c..(i + 1) * c];
            for (k, &xik) in xv.data[i * f..(i + 1) * f].iter().enumerate() {
                if xik == 0.0 {
                    continue;
                }
                for (o, &wkj) in row.iter_mut().zip(&wv.data[k * c..(k + 1) * c]) {
                    *o += xik * wkj;
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c],
            data: out,
        };
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a.tanh()).collect(),
        };
        self.push(value, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(value, Op::Relu { x })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax(self.value(x));
        self.push(value, Op::Softmax { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * a).collect(),
        };
        self.push(value, Op::Square { x })
    }

    /// Sum of all entries, as a tensor of shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(
            Tensor {
                shape: vec![1],
                data: vec![total],
            },
            Op::Sum { x },
        )
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as output).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape != self.value(output).shape {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape,
                self.value(output).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let needs: Vec<bool> = self.requires_grad(output.0);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (n, f) = (xv.shape[0], xv.shape[1]);
                    let c = wv.shape[1];
                    if needs[x.0] {
                        let mut dx = vec![0.0; n * f];
                        for i in 0..n {
                            let gi = &g.data[i * c..(i + 1) * c];
                            for k in 0..f {
                                let wk = &wv.data[k * c..(k + 1) * c];
                                dx[i * f + k] = gi.iter().zip(wk).map(|(a, b)| a * b).sum();
                            }
                        }
                        accumulate(&mut grads, x, Tensor { shape: vec![n, f], data: dx });
                    }
                    if needs[w.0] {
                        let mut dw = vec![0.0; f * c];
                        for i in 0..n {
                            let gi = &g.data[i * c..(i + 1) * c];
                            for (k, &xik) in xv.data[i * f..(i + 1) * f].iter().enumerate() {
                                if xik == 0.0 {
                                    continue;
                                }
                                for (d, &gij) in dw[k * c..(k + 1) * c].iter_mut().zip(gi) {
                                    *d += xik * gij;
                                }
                            }
                        }
                        accumulate(&mut grads, w, Tensor { shape: vec![f, c], data: dw });
                    }
                    if needs[b.0] {
                        let mut db = vec![0.0; c];
                        for gi in g.data.chunks(c) {
                            for (d, v) in db.iter_mut().zip(gi) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, b, Tensor { shape: vec![c], data: db });
                    }
                }
                Op::Tanh { x } => {
                    if needs[x.0] {
                        let y = &node.value;
                        let data = g.data.iter().zip(&y.data).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                        accumulate(&mut grads, x, Tensor { shape: g.shape.clone(), data });
                    }
                }
                Op::Relu { x } => {
                    if needs[x.0] {
                        let xv = self.value(x);
                        let data = g
                            .data
                            .iter()
                            .zip(&xv.data)
                            .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, x, Tensor { shape: g.shape.clone(), data });
                    }
                }
                Op::Softmax { x } => {
                    if needs[x.0] {
                        accumulate(&mut grads, x, softmax_backward(&node.value, &g));
                    }
                }
                Op::Square { x } => {
                    if needs[x.0] {
                        let xv = self.value(x);
                        let data = g.data.iter().zip(&xv.data).map(|(gi, xi)| 2.0 * xi * gi).collect();
                        accumulate(&mut grads, x, Tensor { shape: g.shape.clone(), data });
                    }
                }
                Op::Sum { x } => {
                    if needs[x.0] {
                        let xv = self.value(x);
                        let data = vec![g.data[0]; xv.len()];
                        accumulate(&mut grads, x, Tensor { shape: xv.shape.clone(), data });
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Which nodes up to `last` have a trainable leaf among their ancestors.
    fn requires_grad(&self, last: usize) -> Vec<bool> {
        let mut needs = vec![false; last + 1];
        for idx in 0..=last {
            needs[idx] = match self.nodes[idx].op {
                Op::Leaf { trainable } => trainable,
                Op::Linear { x, w, b } => needs[x.0] || needs[w.0] || needs[b.0],
                Op::Tanh { x } | Op::Relu { x } | Op::Softmax { x } | Op::Square { x } | Op::Sum { x } => needs[x.0],
            };
        }
        needs
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Compare an analytic gradient with central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The result is `max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(x)?;
    if analytic.shape != x.shape {
        return Err(Error::shape(format!(
            "analytic gradient {:?} does not match input {:?}",
            analytic.shape, x.shape
        )));
    }
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data[i];
        probe.data[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

//! Class-imbalance training toolkit for semantic segmentation.
//!
//! Oversampling (repeat factor epoch plans, adaptive IoU-feedback batches),
//! losses with analytic gradients (cross-entropy, OHEM, Lovász-Softmax),
//! learning-rate schedules, grouped IoU evaluation, a synthetic long-tail
//! dataset generator and a deterministic toy training loop tying them together.

pub mod blob;
pub mod cli;
pub mod diffmath;
pub mod error;
pub mod labelmap;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

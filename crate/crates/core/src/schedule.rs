//! Epoch-indexed learning-rate decay with optional restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LR0: f64 = 1e-4;
pub const DEFAULT_ALPHA: f64 = 0.98;
pub const DEFAULT_POWER: f64 = 0.9;
pub const DEFAULT_EPOCHS: usize = 50;
pub const RESTART_FACTOR: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Exponential,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_kind")]
    pub kind: ScheduleKind,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_power")]
    pub p: f64,
    #[serde(default = "default_epochs")]
    pub n: usize,
    #[serde(default, rename = "restarts")]
    pub restart_epochs: Vec<usize>,
    #[serde(default = "default_restart_factor")]
    pub restart_factor: f64,
}

fn default_kind() -> ScheduleKind {
    ScheduleKind::Exponential
}
fn default_lr0() -> f64 {
    DEFAULT_LR0
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_power() -> f64 {
    DEFAULT_POWER
}
fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_restart_factor() -> f64 {
    RESTART_FACTOR
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Exponential,
            lr0: DEFAULT_LR0,
            alpha: DEFAULT_ALPHA,
            p: DEFAULT_POWER,
            n: DEFAULT_EPOCHS,
            restart_epochs: Vec::new(),
            restart_factor: RESTART_FACTOR,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::validation(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(self.p > 0.0) {
            return Err(Error::validation(format!("polynomial power must be positive, got {}", self.p)));
        }
        if self.n == 0 {
            return Err(Error::validation("schedule needs at least one epoch"));
        }
        if !(self.restart_factor > 0.0 && self.restart_factor.is_finite()) {
            return Err(Error::validation("restart factor must be positive"));
        }
        let mut prev = 0;
        for &r in &self.restart_epochs {
            if r <= prev || r >= self.n {
                return Err(Error::validation(format!(
                    "restart epochs must be strictly increasing within [1, {}), got {:?}",
                    self.n, self.restart_epochs
                )));
            }
            prev = r;
        }
        Ok(())
    }
}

/// Learning rate for epoch `epoch` (0-based, up to and including `n`).
///
/// Each restart scales the base rate by `restart_factor` and restarts the
/// decay. A polynomial segment decays to zero at the start of the next
/// segment (or at `n`).
pub fn lr_at(cfg: &ScheduleConfig, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    if epoch > cfg.n {
        return Err(Error::validation(format!("epoch {epoch} outside schedule of {} epochs", cfg.n)));
    }
    let mut base = cfg.lr0;
    let mut start = 0;
    let mut end = cfg.n;
    for (k, &r) in cfg.restart_epochs.iter().enumerate() {
        if r <= epoch {
            base *= cfg.restart_factor;
            start = r;
            end = cfg.restart_epochs.get(k + 1).copied().unwrap_or(cfg.n);
        } else {
            end = end.min(r);
            break;
        }
    }
    let local = epoch - start;
    Ok(match cfg.kind {
        ScheduleKind::Exponential => base * cfg.alpha.powf(local as f64),
        ScheduleKind::Polynomial => {
            let span = (end - start) as f64;
            base * (1.0 - local as f64 / span).powf(cfg.p)
        }
    })
}

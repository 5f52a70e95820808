use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::Result;

/// Patience-based early stopping on validation explained variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Evaluate every this many steps.
    pub eval_every: usize,
    /// Number of evaluations without enough improvement before stopping.
    pub patience: usize,
    /// Minimum improvement, in explained-variance percentage points.
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            eval_every: 100,
            patience: 3,
            min_delta: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Explicit step count; `None` trains for `epochs` passes.
    #[serde(default)]
    pub total_steps: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Learning rates for a sweep.
    #[serde(default)]
    pub lr_grid: Vec<f64>,
    /// Sparsity coefficients for a sweep.
    #[serde(default)]
    pub l1_grid: Vec<f32>,
    #[serde(default)]
    pub ghost_grads: bool,
    /// Resample dead features every this many steps; `None` disables.
    #[serde(default = "default_resample")]
    pub resample_interval: Option<usize>,
    /// Steps without firing after which a feature counts as dead.
    #[serde(default = "default_dead_window")]
    pub dead_window: usize,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_batch() -> usize {
    4096
}
fn default_warmup() -> usize {
    200
}
fn default_epochs() -> usize {
    1
}
fn default_resample() -> Option<usize> {
    Some(3000)
}
fn default_dead_window() -> usize {
    1000
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Lowest and highest learning rates accepted in a sweep grid.
pub const LR_GRID_RANGE: (f64, f64) = (1e-5, 1e-1);
/// Lowest and highest sparsity coefficients accepted in a sweep grid.
pub const L1_GRID_RANGE: (f32, f32) = (1e-11, 1.0);

impl TrainConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            batch_size: default_batch(),
            lr,
            warmup_steps: default_warmup(),
            total_steps: None,
            epochs: default_epochs(),
            lr_grid: Vec::new(),
            l1_grid: Vec::new(),
            ghost_grads: false,
            resample_interval: default_resample(),
            dead_window: default_dead_window(),
            early_stop: None,
            seed: 0,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    /// Number of optimizer steps for a stream of `rows` activations.
    pub fn resolved_steps(&self, rows: usize) -> usize {
        self.total_steps
            .unwrap_or_else(|| (rows * self.epochs).div_ceil(self.batch_size.max(1)))
    }

    /// Checks every field; `rows` resolves an epoch-based step count.
    pub fn validate(&self, rows: usize) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let total = self.resolved_steps(rows);
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            problems.push("lr must be positive".into());
        }
        if self.warmup_steps >= total && total > 0 {
            problems.push(alloc::format!(
                "warmup_steps ({}) must be below total steps ({})",
                self.warmup_steps,
                total
            ));
        }
        if self.total_steps.is_none() && self.epochs == 0 {
            problems.push("epochs must be positive".into());
        }
        let (lo, hi) = LR_GRID_RANGE;
        if self.lr_grid.iter().any(|&v| !(v >= lo && v <= hi)) {
            problems.push(alloc::format!("lr_grid values must lie in [{lo:e}, {hi:e}]"));
        }
        let (lo, hi) = L1_GRID_RANGE;
        if self.l1_grid.iter().any(|&v| !(v >= lo && v <= hi)) {
            problems.push(alloc::format!("l1_grid values must lie in [{lo:e}, {hi:e}]"));
        }
        if self.dead_window == 0 {
            problems.push("dead_window must be positive".into());
        }
        if self.resample_interval == Some(0) {
            problems.push("resample_interval must be positive".into());
        }
        if let Some(es) = self.early_stop {
            if es.eval_every == 0 || es.patience == 0 || !(es.min_delta >= 0.0) {
                problems.push("early_stop needs eval_every, patience > 0 and min_delta >= 0".into());
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            problems.push("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(config_err!("{}", problems.join("; ")))
        }
    }
}

/// Learning rate for the update at `step` out of `total`: linear warmup
/// from 0 to `peak` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

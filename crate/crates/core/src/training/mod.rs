//! Optimization loop, schedules, optimizer state and checkpoints.

mod checkpoint;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, FORMAT, VERSION};
pub use optim::{Adam, AdamConfig};
pub use trainer::{fit, has_any_grad, train_from_config, FitReport, Models, TrainMetrics, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_heads: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub decay_start_fraction: f64,
    /// Identity loss only during the first half of training; when false it
    /// stays on throughout.
    pub identity_half: bool,
    /// Cut the gradient through encoder-branch latents.
    pub stop_gradient: bool,
    pub seed: u64,
    /// Optional cap on the total number of iterations.
    pub max_iterations: Option<u64>,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Log sampled positions every this many iterations; 0 disables.
    pub sampler_log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 1,
            lr_g: 5e-5,
            lr_d: 2e-4,
            lr_heads: 5e-5,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            decay_start_fraction: 0.5,
            identity_half: true,
            stop_gradient: true,
            seed: 0,
            max_iterations: None,
            checkpoint_every: 10,
            sampler_log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.lr_heads > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_start_fraction) {
            return Err(Error::Config("train.decay_start_fraction must lie in [0, 1]".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1)")));
            }
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("train.max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Learning-rate multiplier: 1 up to `decay_start`, then linear to 0 at 1.
pub fn lr_factor_with(progress: f64, decay_start: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    if p <= decay_start || decay_start >= 1.0 {
        1.0
    } else {
        (1.0 - p) / (1.0 - decay_start)
    }
}

/// [`lr_factor_with`] at the default halfway decay start.
pub fn lr_factor(progress: f64) -> f64 {
    lr_factor_with(progress, 0.5)
}

/// Whether the identity term is on; the halfway boundary is exclusive.
pub fn identity_active(progress: f64) -> bool {
    progress < 0.5
}

/// Peak resident set size of this process in bytes, 0 where unavailable.
pub fn memory_peak_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map(|kb| kb * 1024)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(lr_factor(0.0), 1.0);
        assert_eq!(lr_factor(0.5), 1.0);
        assert_eq!(lr_factor(0.75), 0.5);
        assert_eq!(lr_factor(1.0), 0.0);
        assert!(identity_active(0.0));
        assert!(!identity_active(0.5));
        assert!(!identity_active(0.9));
        assert_eq!(lr_factor_with(0.9, 1.0), 1.0);
        assert_eq!(lr_factor_with(0.5, 0.0), 0.5);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { lr_d: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { decay_start_fraction: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Parameter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap applied before the moment update.
    pub clip_norm: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay_per_epoch: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.5,
            lr_decay_per_epoch: 0.99,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_per_epoch must be in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate after `epoch` completed epochs of decay.
    pub fn scheduled_lr(&self, epoch: u64) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    /// Gradients contained NaN/Inf; the update was dropped and the
    /// gradients cleared.
    SkippedNonFinite,
}

/// Optimizer state beyond the per-parameter moments (which live inside each
/// [`Parameter`] so they follow the tensors through checkpoints).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimizerConfig,
    /// Completed (applied) update count; drives bias correction.
    pub step_count: u64,
    /// Updates dropped because of non-finite gradients.
    pub skipped: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step_count: 0, skipped: 0 })
    }

    /// One AdamW update over every parameter at learning rate `lr`
    /// (pre-scheduled by the caller).  Gradients are consumed: cleared both
    /// on success and on a skipped step.
    pub fn step(&mut self, mut params: Vec<&mut Parameter>, lr: f64) -> StepOutcome {
        let mut sq_norm = 0.0;
        for p in params.iter() {
            for g in p.grad.iter() {
                sq_norm += g * g;
            }
        }
        if !sq_norm.is_finite() {
            self.skipped += 1;
            for p in params.iter_mut() {
                p.grad.fill(0.0);
            }
            return StepOutcome::SkippedNonFinite;
        }
        let norm = sq_norm.sqrt();
        let scale = if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let (eps, wd) = (self.config.eps, self.config.weight_decay);

        for p in params.iter_mut() {
            for ((theta, g), (m, v)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(p.moment1.iter_mut().zip(p.moment2.iter_mut()))
            {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
            }
            p.grad.fill(0.0);
        }
        StepOutcome::Applied { grad_norm: norm }
    }
}

//! AdamW with linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for the per-epoch shuffle of the training set.
    pub shuffle_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-3,
            weight_decay: 1e-2,
            warmup_frac: 0.10,
            epochs: 10,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle_seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("optim: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return err(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return err("betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_size: usize) -> usize {
        train_size.div_ceil(self.batch_size)
    }
}

/// Warmup-then-cosine learning rate at step `t` (0-based) of `total`.
///
/// `lr * t / T_w` for `t < T_w`, then `lr * (1 + cos(pi (t - T_w) / (T - T_w))) / 2`,
/// with `T_w = floor(warmup_frac * T)`.
pub fn scheduled_lr(base_lr: f64, warmup_frac: f64, t: usize, total: usize) -> f64 {
    let warmup = (warmup_frac * total as f64).floor() as usize;
    if t < warmup {
        return base_lr * t as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig, params: &[Param], total_steps: usize) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamW {
            config,
            total_steps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        scheduled_lr(self.config.lr, self.config.warmup_frac, self.step, self.total_steps)
    }

    /// One update with decoupled weight decay on `decay` parameters.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adamw", &[params.len()], &[grads.len()]));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != p.value.numel() {
                return Err(Error::shape("adamw", p.value.shape(), &[g.len()]));
            }
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

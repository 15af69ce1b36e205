//! AdamW with global-norm clipping and a warmup-plus-cosine learning rate.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer hyperparameters out of range".into()))
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `min_ratio * peak` at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak: lr,
            warmup_steps: 0,
            total_steps: 0,
            min_ratio: 1.0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak * if self.total_steps == 0 { 1.0 } else { self.min_ratio };
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + Float::cos(core::f64::consts::PI * progress));
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }

    /// Learning rate after the last step.
    pub fn final_lr(&self) -> f64 {
        self.at(self.total_steps.saturating_sub(1).max(self.warmup_steps))
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Result of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<T: Real>(params: &DenoiserParams<T>) -> f64 {
    let sq: f64 = params
        .tensors()
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| {
            let x = g.as_f64();
            x * x
        })
        .sum();
    Float::sqrt(sq)
}

impl AdamW {
    pub fn new<T: Real>(config: AdamWConfig, params: &DenoiserParams<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| alloc::vec![0.0; t.len()]).collect();
        Ok(AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips, applies one AdamW update at `lr` and clears the gradients.
    /// Norm gains are exempt from weight decay.
    pub fn step<T: Real>(&mut self, params: &mut DenoiserParams<T>, lr: f64) -> Result<StepStats> {
        let norm = grad_norm(params);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let c = &self.config;
        let scale = if norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - Float::powi(c.beta1, self.t as i32);
        let bc2 = 1.0 - Float::powi(c.beta2, self.t as i32);
        let names: Vec<bool> = params.tensors().iter().map(|(n, _)| n.ends_with("norm")).collect();
        for (i, t) in params.tensors_mut().enumerate() {
            let Some(grad) = t.take_grad() else { continue };
            let decay = if names[i] { 0.0 } else { c.weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = grad[j].as_f64() * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let upd = (m[j] / bc1) / (Float::sqrt(v[j] / bc2) + c.eps);
                let wf = w.as_f64();
                *w = T::lit(wf - lr * (upd + decay * wf));
            }
            t.zero_grad();
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped_norm: norm * scale,
            lr,
        })
    }
}

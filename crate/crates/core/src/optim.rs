//! AdamW with global-norm clipping and a warmup + cosine learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_steps: u64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            warmup_steps: 50,
            min_lr_ratio: 0.05,
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
            && self.clip_norm >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio);
        if !ok {
            return Err(invalid_arg!("invalid optimizer settings {:?}", self));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t));
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Optimizer state; moments share the parameter store layout.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub step: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, m: params.zeros_like(), v: params.zeros_like(), step: 0 })
    }

    /// Applies one update with learning rate `lr`; returns the gradient norm
    /// before clipping.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>, lr: f64) -> f64 {
        let norm = grad_norm(grads);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(self.cfg.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(self.cfg.beta2, t);
        let (b1, b2) = (F::lit(self.cfg.beta1), F::lit(self.cfg.beta2));
        let (one, eps) = (F::one(), F::lit(self.cfg.eps));
        let step = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let decay = F::lit(1.0 - lr * self.cfg.weight_decay);
        let clip = F::lit(clip);
        let iter = params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in iter {
            let data = p.value.data_mut();
            let (md, vd) = (m.value.data_mut(), v.value.data_mut());
            for i in 0..data.len() {
                let gi = g.value.data()[i] * clip;
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let denom = (vd[i] * inv_bc2).sqrt() + eps;
                data[i] = data[i] * decay - step * md[i] / denom;
            }
        }
        norm
    }
}

pub fn grad_norm<F: Float>(grads: &ParamStore<F>) -> f64 {
    let s: f64 = grads.iter().map(|g| g.value.sq_norm().to_f64().unwrap_or(f64::NAN)).sum();
    num_traits::Float::sqrt(s)
}

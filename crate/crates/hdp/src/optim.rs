//! AdamW with linear warmup plus an exponential moving average of the
//! weights for evaluation.

use crate::error::{HdpError, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-3,
            warmup_steps: 500,
            grad_clip: Some(1.0),
        }
    }
}

pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &[Array2<f32>]) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps > 0 && step < self.cfg.warmup_steps {
            self.cfg.lr * (step + 1) as f64 / self.cfg.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }

    /// One update. `decay_mask[i]` selects which tensors receive weight
    /// decay (weight matrices, not biases/norms/embeddings).
    pub fn apply(
        &mut self,
        params: &mut [Array2<f32>],
        grads: &mut [Array2<f32>],
        decay_mask: &[bool],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(HdpError::ShapeMismatch("optimizer state mismatch".into()));
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            let mut sq = 0.0f64;
            for g in grads.iter() {
                for x in g.iter() {
                    sq += (*x as f64) * (*x as f64);
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                let scale = (max_norm / norm) as f32;
                for g in grads.iter_mut() {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
        let lr = self.lr_at(self.step) as f32;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let eps = self.cfg.eps as f32;
        let wd = self.cfg.weight_decay as f32;
        for i in 0..params.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, g| {
                *m = b1 * *m + (1.0 - b1) * *g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, g| {
                *v = b2 * *v + (1.0 - b2) * *g * *g;
            });
            let decay = if decay_mask[i] { wd } else { 0.0 };
            ndarray::Zip::from(&mut params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, m, v| {
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + decay * *p);
                });
        }
        self.step += 1;
        Ok(())
    }
}

/// Exponential moving average of parameter tensors.
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Array2<f32>>,
}

impl Ema {
    pub fn new(decay: f64, params: &[Array2<f32>]) -> Self {
        Ema {
            decay,
            shadow: params.to_vec(),
        }
    }

    /// Ramp the effective decay up from zero so early steps are not
    /// dominated by the random initialization.
    pub fn update(&mut self, params: &[Array2<f32>], step: u64) {
        let d = self.decay.min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            ndarray::Zip::from(s).and(p).for_each(|s, p| {
                *s = d * *s + (1.0 - d) * *p;
            });
        }
    }
}

//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SedError};
use crate::real::Real;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of the peak rate.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 200,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio);
        if ok {
            Ok(())
        } else {
            Err(SedError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Rate for 0-based `step` of a run of `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = peak * self.min_lr_ratio;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

/// One tensor handed to [`AdamW::update`].
pub struct ParamSlot<'a, T> {
    pub value: &'a mut Matrix<T>,
    pub grad: &'a Matrix<T>,
    pub decay: bool,
}

impl<T: Real> AdamW<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Applies one update with rate `lr`. Returns the gradient norm before
    /// clipping.
    pub fn update(&mut self, config: &OptimConfig, lr: f64, slots: &mut [ParamSlot<'_, T>]) -> f64 {
        assert_eq!(slots.len(), self.m.len(), "slot count mismatch");
        let norm = slots
            .iter()
            .map(|s| s.grad.sum_squares().to_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if config.grad_clip > 0.0 && norm > config.grad_clip {
            config.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - config.beta1.powi(self.step as i32);
        let bc2 = 1.0 - config.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(config.beta1), T::from_f64(config.beta2));
        let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
        let clip = T::from_f64(clip);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(config.eps);
        for (i, slot) in slots.iter_mut().enumerate() {
            let decay = if slot.decay {
                T::from_f64(1.0 - lr * config.weight_decay)
            } else {
                T::ONE
            };
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = slot.value.as_mut_slice();
            for (((p, &g), m), v) in p.iter_mut().zip(slot.grad.as_slice()).zip(m).zip(v) {
                let g = g * clip;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

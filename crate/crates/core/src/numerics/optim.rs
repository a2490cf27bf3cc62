use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{GilaError, Result};

/// Linear warm-up to `peak`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64, total_steps: u64) -> Result<Self> {
        if total_steps <= warmup {
            return Err(GilaError::config(format!(
                "total_steps ({total_steps}) must exceed warmup ({warmup})"
            )));
        }
        Ok(Self {
            peak,
            warmup,
            total_steps,
        })
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        if t <= self.warmup {
            if self.warmup == 0 {
                return self.peak;
            }
            self.peak * t as f64 / self.warmup as f64
        } else if t >= self.total_steps {
            0.0
        } else {
            self.peak * (self.total_steps - t) as f64 / (self.total_steps - self.warmup) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of every trainable parameter at
    /// learning rate `lr`; gradients are zeroed afterwards.
    pub fn step<R: Real>(&self, store: &mut ParamStore<R>, lr: f64) {
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let eps = R::of(self.eps);
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = R::of(1.0 - self.beta1.powi(t));
            let c2 = R::of(1.0 - self.beta2.powi(t));
            let lr = R::of(lr);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i];
                p.adam_m[i] = b1 * p.adam_m[i] + (R::one() - b1) * g;
                p.adam_v[i] = b2 * p.adam_v[i] + (R::one() - b2) * g * g;
                let mh = p.adam_m[i] / c1;
                let vh = p.adam_v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
                p.grad[i] = R::zero();
            }
        }
    }
}

//! Adaptive-moment optimizer with bias correction and global-norm clipping.

use crate::nn::Param;
use crate::TensorError;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
        }
    }
}

impl Adam {
    pub fn new(clip_norm: Option<f64>) -> Self {
        Adam {
            clip_norm,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter, then zero grads.
    pub fn step(&mut self, params: &[Param], lr: f64) -> Result<(), TensorError> {
        let mut sq = 0.0;
        for p in params {
            let inner = p.inner.borrow();
            if !inner.trainable {
                continue;
            }
            for g in &inner.grad {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite(format!("gradient of {}", inner.name)));
                }
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for p in params {
            let mut inner = p.inner.borrow_mut();
            if !inner.trainable {
                continue;
            }
            let inner = &mut *inner;
            for i in 0..inner.value.len() {
                let g = inner.grad[i] * scale;
                inner.m[i] = self.beta1 * inner.m[i] + (1.0 - self.beta1) * g;
                inner.v[i] = self.beta2 * inner.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = inner.m[i] / bc1;
                let vhat = inner.v[i] / bc2;
                inner.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                inner.grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

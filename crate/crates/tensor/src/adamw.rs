//! AdamW with decoupled weight decay and a step-wise learning-rate schedule.
//!
//! ```text
//! value *= 1 - lr * weight_decay
//! m = beta1 * m + (1 - beta1) * g
//! v = beta2 * v + (1 - beta2) * g^2
//! value -= lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
//! ```

use crate::error::{Result, TensorError};
use crate::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    /// Initial learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate reductions.
    pub decay_every: u64,
    /// Multiplier applied at every reduction.
    pub decay_factor: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_every: 1000,
            decay_factor: 0.5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| {
            Err(TensorError::Invalid {
                op: "AdamWConfig",
                reason,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("schedule needs decay_every >= 1 and decay_factor in (0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// One AdamW update of every parameter in `store` at learning rate `lr`.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &AdamWConfig, lr: f64) {
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let eps = T::from_f64(cfg.eps);
    for p in store.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
        let c2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
        let lr_t = T::from_f64(lr);
        let value = p.value.data_mut();
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        for (((x, &g), mi), vi) in value.iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *x *= decay;
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            let m_hat = *mi * c1;
            let v_hat = *vi * c2;
            *x -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Shape4, Tensor};

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_vec(Shape4::new(1, 1, 1, values.len()), values.to_vec()).unwrap());
        s.get_mut(id).grad.data_mut().copy_from_slice(grads);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = store(&[0.5, -1.0], &[0.0, 0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg, cfg.lr);
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step: m_hat = g, v_hat = g^2 so the update is lr * g / (|g| + eps)
        let g = 0.3;
        let mut s = store(&[1.0], &[g]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg, cfg.lr);
        let moved = 1.0 - s.iter().next().unwrap().value.data()[0];
        let expected = cfg.lr * g / (g + cfg.eps);
        assert!((moved - expected).abs() < 1e-15, "{moved} vs {expected}");
        assert!((moved - cfg.lr).abs() < 1e-10);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = store(&[2.0], &[0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut s, &cfg, 0.01);
        let p = s.iter().next().unwrap();
        assert_eq!(p.value.data()[0], 2.0 * (1.0 - 0.01 * 0.1));
        assert_eq!(p.m.data()[0], 0.0);
        assert_eq!(p.v.data()[0], 0.0);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn schedule_halves_every_thousand_epochs() {
        let cfg = AdamWConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(999), 1e-4);
        assert_eq!(cfg.lr_at(1000), 5e-5);
        assert_eq!(cfg.lr_at(2500), 2.5e-5);
    }

    #[test]
    fn validation() {
        assert!(AdamWConfig::default().validate().is_ok());
        assert!(AdamWConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { lr: -1.0, ..Default::default() }.validate().is_err());
    }
}

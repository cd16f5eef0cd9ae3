//! Decoupled weight-decay Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers, keyed by parameter name.
pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over all named parameters. `lr` is passed per call so the
    /// trainer can apply warmup; decay is decoupled from the gradient path.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        for (name, p) in params {
            let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
            if grad.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "adamw: grad len {} vs param len {} for {name}",
                    grad.len(),
                    p.numel()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let mut data = p.to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lr_t * (m_hat / (v_hat.sqrt() + eps)) - lr_t * wd * data[i];
            }
            p.set_data(data)?;
        }
        Ok(())
    }

    pub fn zero_grads(&self, params: &[(String, Tensor<T>)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: wd,
            eps: 1e-8,
        }
    }

    fn set_grad(p: &Tensor<f64>, g: &[f64]) {
        p.accumulate_grad(g);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let p = Tensor::<f64>::param(vec![2], vec![0.5, -0.25]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        set_grad(&p, &[0.0, 0.0]);
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        opt.step(&params, 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, -0.25]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias-corrected first step with g=1: m_hat=1, v_hat=1, so the update
        // is lr/(1+eps) ~ lr.
        let p = Tensor::<f64>::param(vec![1], vec![1.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        set_grad(&p, &[1.0]);
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        opt.step(&params, 0.1).unwrap();
        let got = p.to_vec()[0];
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd_p() {
        let p0 = 2.0;
        let p = Tensor::<f64>::param(vec![1], vec![p0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        set_grad(&p, &[0.0]);
        let mut opt = AdamW::new(cfg(0.1, 0.5));
        opt.step(&params, 0.1).unwrap();
        let got = p.to_vec()[0];
        assert!((got - (p0 - 0.1 * 0.5 * p0)).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0]); // too short: accumulate pads nothing, len 1
        let params = vec![("p".to_string(), p.clone())];
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        assert!(opt.step(&params, 0.1).is_err());
    }
}

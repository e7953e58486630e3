//! AdamW: Adam moments with bias correction and decoupled weight decay.
//!
//! ```text
//! m = b1 m + (1 - b1) g
//! v = b2 v + (1 - b2) g^2
//! p = p - lr wd p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::{Gradients, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place. Parameters without a gradient are treated
    /// as having a zero gradient; the moment buffers are bound to the order of
    /// `params` on the first call.
    pub fn step(&mut self, params: &mut [&mut Parameter], grads: &Gradients) -> Result<()> {
        let explicit: Vec<Option<Tensor>> =
            params.iter().map(|p| grads.param(p).cloned()).collect();
        self.step_with(params, &explicit)
    }

    pub fn step_with(
        &mut self,
        params: &mut [&mut Parameter],
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, given {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if self.first[i].shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "moment buffer {i} no longer matches its parameter"
                )));
            }
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(format!("gradient {i} shape {:?}", g.shape())));
                }
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * weight_decay * *w + lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new(Tensor::scalar(v))
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = scalar_param(0.7);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step_with(&mut [&mut p], &[Some(Tensor::scalar(0.0))])
                .unwrap();
        }
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step_with(&mut [&mut p], &[Some(Tensor::scalar(1.0))])
            .unwrap();
        // m_hat = 1, v_hat = 1: p = 1 - 0.1 / (1 + 1e-8)
        assert!((p.value.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_magnitude() {
        let mut p = Parameter::new(Tensor::new(vec![2], vec![2.0, -3.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut last = [2.0f64, 3.0];
        for _ in 0..10 {
            opt.step_with(&mut [&mut p], &[None]).unwrap();
            for (l, v) in last.iter_mut().zip(p.value.data()) {
                assert!(v.abs() < *l);
                *l = v.abs();
            }
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = scalar_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step_with(&mut [&mut p], &[]).is_err());
        assert!(opt
            .step_with(&mut [&mut p], &[Some(Tensor::zeros(&[2]))])
            .is_err());
    }
}

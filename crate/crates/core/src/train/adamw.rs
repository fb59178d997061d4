use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept for every trainable
/// parameter of the store it was created for.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect::<Vec<_>>();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p` for every
    /// trainable parameter. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Usage(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::Training {
                    epoch: 0,
                    batch: 0,
                    reason: format!("non-finite gradient in {}", p.name),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let inv_c1 = (1.0 / (1.0 - beta1.powi(self.step as i32))) as f32;
        let inv_c2 = (1.0 / (1.0 - beta2.powi(self.step as i32))) as f32;
        let (b1, b2, eps, lr_f, shrink) = (
            beta1 as f32,
            beta2 as f32,
            eps as f32,
            lr as f32,
            (1.0 - lr * weight_decay) as f32,
        );
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let update = (*mi * inv_c1) / ((*vi * inv_c2).sqrt() + eps);
                *x = shrink * *x - lr_f * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    fn scalar_store(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), true).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    fn value(s: &ParamStore) -> f32 {
        s.iter().next().unwrap().1.value.data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, 0.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(value(&s), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, 0.1).unwrap();
        // m_hat = 1, v_hat = 1, so the update is 1 / (1 + 1e-8)
        assert!((value(&s) - 0.9).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, 0.1).unwrap();
        assert!((value(&s) - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = scalar_store(1.0, f32::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient in p"), "{err}");
        assert_eq!(value(&s), 1.0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("frozen", Tensor::scalar(3.0), false).unwrap();
        s.get_mut(id).grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data()[0], 3.0);
    }
}

//! Adam with bias correction, and the exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - self.config.beta1.powf(self.step as f64));
        let bc2 = T::lit(1.0 - self.config.beta2.powf(self.step as f64));
        let eps = T::lit(self.config.eps);
        let lr = T::lit(lr);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// `lr(i) = init · (final / init)^(i / total)`, smooth per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialDecay {
    pub init: f64,
    pub last: f64,
    pub total: u64,
}

impl ExponentialDecay {
    pub fn at(&self, iteration: u64) -> f64 {
        if self.total == 0 {
            return self.init;
        }
        let frac = iteration as f64 / self.total as f64;
        self.init * (self.last / self.init).powf(frac)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Param;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[&mut Param]) -> Self {
        let zeros = |p: &&mut Param| Tensor::zeros(p.value.shape());
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.value.shape() != m.shape() {
                return Err(Error::shape("parameter shape changed under the optimizer"));
            }
            let grads = p.grad.data().to_vec();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i];
                *x *= 1.0 - c.lr * c.weight_decay;
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * g;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * g * g;
                *x -= c.lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::{Gradients, NnError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled (L2-style) decay: `g += weight_decay · θ` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with bias correction.
///
/// Only parameters that appear in the supplied gradients are touched, so
/// frozen parameters are handled by leaving them out of the gradient set.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<(), NnError> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let param = params.get_mut(name)?;
            if param.shape() != g.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "adam",
                    left: param.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            Zip::from(param.value_mut())
                .and(g)
                .and(m)
                .and(v)
                .for_each(|theta, &grad, m, v| {
                    let grad = grad + weight_decay * *theta;
                    *m = beta1 * *m + (1.0 - beta1) * grad;
                    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

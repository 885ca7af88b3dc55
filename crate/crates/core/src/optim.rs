//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug)]
pub struct AdamWState<S> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<S>>,
    second: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, grad)` pair. `lr` overrides the
    /// configured base rate so schedules can feed the current value.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Vec<S>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let beta1 = S::of_f64(c.beta1);
        let beta2 = S::of_f64(c.beta2);
        let one = S::one();
        let corr1 = S::of_f64(1.0 - c.beta1.powi(t as i32));
        let corr2 = S::of_f64(1.0 - c.beta2.powi(t as i32));
        let lr_s = S::of_f64(lr);
        let eps = S::of_f64(c.eps);
        let wd = S::of_f64(c.weight_decay);

        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Input(format!("gradient for unknown parameter `{name}`")))?;
            if grad.len() != param.numel() {
                return Err(Error::Dim(format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    grad.len(),
                    param.numel()
                )));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            for ((p, &g), (m_i, v_i)) in param
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m_i = beta1 * *m_i + (one - beta1) * g;
                *v_i = beta2 * *v_i + (one - beta2) * g * g;
                let m_hat = *m_i / corr1;
                let v_hat = *v_i / corr2;
                // decoupled decay: applied to the parameter, not the gradient
                *p = *p - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

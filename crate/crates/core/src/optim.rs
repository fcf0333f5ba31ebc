//! Adam and AdamW over a [`ParamStore`].
//!
//! Only parameters that received a gradient in the current step move; a
//! parameter absent from the step keeps its value and its moment buffers.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled (AdamW) decay when true, L2-in-gradient when false.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decoupled: false }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, decoupled: true, ..Self::adam(lr) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    /// One update. Frozen parameters are skipped even if a gradient is given.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        let c = self.config;
        for (id, grad) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let value = store.get_mut(*id).data_mut();
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; value.len()],
                v: vec![0.0; value.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - libm::pow(c.beta1, st.step as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, st.step as f64);
            for i in 0..value.len() {
                let mut g = grad[i];
                if c.weight_decay != 0.0 && !c.decoupled {
                    g += c.weight_decay * value[i];
                }
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                if c.decoupled && c.weight_decay != 0.0 {
                    value[i] -= c.lr * c.weight_decay * value[i];
                }
                value[i] -= c.lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
    }
}

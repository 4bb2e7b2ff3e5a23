use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub step_count: u64,
}

/// AdamW with decoupled weight decay: `p ← p·(1 − lr·wd)` is applied before
/// the bias-corrected moment update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamWState::default(),
        }
    }

    /// One update of every parameter with `requires_grad`. A parameter with
    /// no accumulated gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let m = self.state.first_moment.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.state.second_moment.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::contract(format!(
                    "optimizer moments for {name} have {} entries, parameter has {n}",
                    m.len()
                )));
            }
            let decay = 1.0 - cfg.lr * cfg.weight_decay;
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                *pv *= decay;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

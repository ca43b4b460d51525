//! Plain SGD and bias-corrected Adam.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Adam moment-decay rates and denominator stabilizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: AdamParams,
    step_count: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        Self::with_adam_params(kind, lr, AdamParams::default())
    }

    pub fn with_adam_params(kind: OptimizerKind, lr: f64, adam: AdamParams) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(adam.beta1) || !in_unit(adam.beta2) || !(adam.eps >= 0.0) {
            return Err(Error::Config(format!("invalid Adam parameters {adam:?}")));
        }
        Ok(Optimizer { kind, lr, adam, step_count: 0, moments: BTreeMap::new() })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn adam_params(&self) -> AdamParams {
        self.adam
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates every trainable parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids = store.trainable();
        self.step_params(store, &ids)
    }

    /// Updates exactly `ids`. Every listed parameter must be trainable and
    /// carry a gradient; nothing is modified otherwise.
    pub fn step_params(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let t = store.get(id);
            if !t.requires_grad() {
                return Err(Error::Usage(format!("parameter '{}' is frozen", store.name(id))));
            }
            if t.grad().is_none() {
                return Err(Error::Usage(format!("parameter '{}' has no gradient", store.name(id))));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for &id in ids {
            let tensor = store.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let AdamParams { beta1, beta2, eps } = self.adam;
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clears every gradient in `store` to zero.
pub fn zero_grads(store: &mut ParamStore) {
    store.zero_grads();
}

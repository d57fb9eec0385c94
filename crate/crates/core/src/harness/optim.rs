//! Warm-up learning-rate schedule and Adagrad.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::params::ParamStore;

pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Initial value of every Adagrad accumulator.
    pub adagrad_init: f64,
    /// Steps between evaluation points on the training curve; 0 evaluates only at
    /// the end.
    pub eval_every: u64,
    /// Seed of the batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            lr_start: 0.001,
            lr_peak: 0.012,
            warmup_steps: 2000,
            total_steps: 20000,
            adagrad_init: 0.1,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_start <= lr_peak, got {} and {}",
                self.lr_start, self.lr_peak
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config("warmup_steps exceeds total_steps".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalization".into()));
        }
        if !(self.adagrad_init >= 0.0 && self.adagrad_init.is_finite()) {
            return Err(Error::Config("adagrad_init must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_start` at step 0 to `lr_peak` at `warmup_steps`, then
/// constant.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.warmup_steps {
        return cfg.lr_peak;
    }
    let frac = step as f64 / cfg.warmup_steps as f64;
    cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac
}

/// Per-parameter squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adagrad {
    pub accumulators: BTreeMap<String, Tensor>,
}

impl Adagrad {
    pub fn new(params: &ParamStore, init: f64) -> Self {
        Self {
            accumulators: params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::full(t.shape(), init)))
                .collect(),
        }
    }

    /// `acc += g²; θ −= lr·g/√(acc + ε)`. A non-finite gradient anywhere skips the
    /// whole step and returns `false`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Tensor>, lr: f64) -> Result<bool> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            log::warn!("non-finite gradient for {name}; skipping step");
            return Ok(false);
        }
        for (name, g) in grads {
            let acc = self
                .accumulators
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no accumulator for parameter {name}")))?;
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if acc.shape() != g.shape() || theta.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            for ((t, a), gv) in theta.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
                *a += gv * gv;
                *t -= lr * gv / (*a + ADAGRAD_EPS).sqrt();
            }
        }
        Ok(true)
    }
}

//! Named parameter storage and deterministic initialization.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::fnv1a;
use crate::numcore::{Graph, NodeId, Tensor};

/// Ordered map of parameter name → tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `graph` and returns name → node.
    pub fn bind(&self, graph: &mut Graph) -> Binding {
        Binding {
            nodes: self
                .entries
                .iter()
                .map(|(name, t)| (name.clone(), graph.param(name.clone(), t.clone())))
                .collect(),
        }
    }
}

/// Node ids of parameters registered on one graph.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    nodes: HashMap<String, NodeId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }
}

/// RNG stream for one parameter; independent of which other parameters exist, so
/// shared parameters start identical across ablation variants.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

pub fn normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
}

/// He-style uniform init for a `[fan_in, fan_out]` weight.
pub fn he_uniform(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let mut rng = param_rng(seed, name);
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

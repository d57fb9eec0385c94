//! Model assembly: embeddings → field gates → semantic transformation → adaptive
//! bias tower → sigmoid head, with per-module ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{embed_batch, EncodedBatch, FieldDef, Schema, Vocabulary};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::params::{normal, Binding, ParamStore};
use crate::stabt::{self, Mode, RunningStats, TowerConfig, TowerOutput};
use crate::stael;
use crate::ststl::{self, Dims, RankMode};

pub const EMBEDDING: &str = "embedding";

/// The five rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoStael,
    NoStstl,
    NoStabt,
    Static,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoStael,
        Variant::NoStstl,
        Variant::NoStabt,
        Variant::Static,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "BASM",
            Variant::NoStael => "w/o StAEL",
            Variant::NoStstl => "w/o StSTL",
            Variant::NoStabt => "w/o StABT",
            Variant::Static => "static",
        }
    }

    /// `(use_stael, use_ststl, use_stabt_modulation)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Full => (true, true, true),
            Variant::NoStael => (false, true, true),
            Variant::NoStstl => (true, false, true),
            Variant::NoStabt => (true, true, false),
            Variant::Static => (false, false, false),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_slope() -> f64 {
    stabt::DEFAULT_LEAKY_SLOPE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schema: Schema,
    pub ststl_rank: RankMode,
    pub tower_widths: Vec<usize>,
    #[serde(default = "default_true")]
    pub use_stael: bool,
    #[serde(default = "default_true")]
    pub use_ststl: bool,
    #[serde(default = "default_true")]
    pub use_stabt_modulation: bool,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Standard deviation of the initial embedding rows.
    pub embedding_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(schema: Schema) -> Self {
        Self {
            schema,
            ststl_rank: RankMode::Full,
            tower_widths: vec![256, 128, 64],
            use_stael: true,
            use_ststl: true,
            use_stabt_modulation: true,
            leaky_slope: stabt::DEFAULT_LEAKY_SLOPE,
            embedding_std: 0.05,
            seed: 0,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_stael, self.use_ststl, self.use_stabt_modulation) = v.flags();
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        let flags = (self.use_stael, self.use_ststl, self.use_stabt_modulation);
        Variant::ALL.into_iter().find(|v| v.flags() == flags)
    }

    pub fn ststl_dims(&self) -> Dims {
        let d = self.schema.concat_width();
        Dims {
            d_in: d,
            d_out: d,
            meta_in: self.schema.context_width() + self.schema.behavior_width(),
        }
    }

    pub fn tower_config(&self) -> TowerConfig {
        TowerConfig {
            input_width: self.schema.concat_width(),
            context_width: self.schema.context_width(),
            widths: self.tower_widths.clone(),
            adaptive: self.use_stabt_modulation,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn gated_fields(&self) -> Vec<(String, usize)> {
        self.schema
            .fields
            .iter()
            .map(|f| (f.name().to_string(), self.schema.field_width(f)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.use_ststl {
            self.ststl_dims().check(self.ststl_rank)?;
        }
        self.tower_config().validate()?;
        if !(self.embedding_std.is_finite() && self.embedding_std > 0.0) {
            return Err(Error::Config("embedding_std must be positive".into()));
        }
        if !self.schema.fields.iter().any(|f| matches!(f, FieldDef::Behavior { .. })) {
            return Err(Error::Config("schema needs a behavior field".into()));
        }
        Ok(())
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BasmModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub running: RunningStats,
}

/// Nodes of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub binding: Binding,
    /// `[rows × 1]` head logits.
    pub logits: NodeId,
    /// Per gated field `[rows × 1]` gate values; empty without the gate layer.
    pub alphas: Vec<NodeId>,
    pub tower: TowerOutput,
}

impl BasmModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::new(config.schema.clone())?;
        let seed = config.seed;
        let mut params = ParamStore::new();
        params.insert(
            EMBEDDING,
            normal(seed, EMBEDDING, &[vocab.len(), config.schema.embedding_dim], config.embedding_std),
        );
        if config.use_stael {
            stael::init_params(&mut params, &config.gated_fields(), config.schema.context_width());
        }
        ststl::init_params(&mut params, config.ststl_dims(), config.ststl_rank, config.use_ststl, seed)?;
        let tower = config.tower_config();
        stabt::init_params(&mut params, &tower, seed)?;
        Ok(Self {
            running: RunningStats::new(&tower),
            config,
            vocab,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, which must match the layout `config`
    /// produces.
    pub fn from_parts(config: ModelConfig, params: ParamStore, running: RunningStats) -> Result<Self> {
        let fresh = Self::new(config)?;
        let names = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
        };
        if names(&fresh.params) != names(&params) {
            return Err(Error::Config("stored parameters do not match the model configuration".into()));
        }
        let widths = |r: &RunningStats| -> Vec<(usize, usize)> {
            r.mean.iter().zip(&r.var).map(|(m, v)| (m.len(), v.len())).collect()
        };
        if widths(&fresh.running) != widths(&running) {
            return Err(Error::Config("stored batch-norm statistics do not match the tower".into()));
        }
        Ok(Self {
            params,
            running,
            ..fresh
        })
    }

    /// Records the full forward pass of an encoded batch.
    pub fn forward(&self, graph: &mut Graph, batch: &EncodedBatch, mode: Mode) -> Result<ForwardPass> {
        let binding = self.params.bind(graph);
        let emb = embed_batch(graph, binding.get(EMBEDDING)?, batch)?;
        let names: Vec<String> = self.config.gated_fields().into_iter().map(|(n, _)| n).collect();
        let gates = stael::apply_gates(graph, &binding, &names, &emb.fields, emb.context, self.config.use_stael)?;
        let meta_input = graph.concat(&[emb.context, emb.filtered_behavior], 1)?;
        let h_star = ststl::forward(
            graph,
            &binding,
            gates.concat,
            meta_input,
            self.config.ststl_rank,
            self.config.use_ststl,
        )?;
        let tower = stabt::forward(
            graph,
            &binding,
            &self.config.tower_config(),
            h_star,
            emb.context,
            mode,
            &self.running,
        )?;
        Ok(ForwardPass {
            binding,
            logits: tower.logits,
            alphas: gates.alphas,
            tower,
        })
    }

    /// Eval-mode click probabilities.
    pub fn predict(&self, batch: &EncodedBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, Mode::Eval)?;
        let probs = g.sigmoid(pass.logits)?;
        Ok(g.value(probs).data().to_vec())
    }

    /// Eval-mode gate values per row, `[rows × fields]`.
    pub fn gate_values(&self, batch: &EncodedBatch) -> Result<Tensor> {
        if !self.config.use_stael {
            return Err(Error::Usage("model was built without the gate layer".into()));
        }
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, Mode::Eval)?;
        let cat = g.concat(&pass.alphas, 1)?;
        Ok(g.value(cat).clone())
    }
}

//! The TOML run configuration and the command-line flags that override it.

use std::path::{Path, PathBuf};

use basm_core::features::{observed_slots, VocabFile};
use basm_core::harness::TrainConfig;
use basm_core::ststl::RankMode;
use basm_core::synthgen::GenConfig;
use basm_core::{Error, Impression, ModelConfig, Result, Schema, Variant};
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run_dir: Option<PathBuf>,
    pub data: DataSection,
    pub generate: GenConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub ablate: AblateSection,
    pub gradcheck: GradcheckSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `dataset.jsonl` and `vocab.json`.
    pub dir: Option<PathBuf>,
    /// Share of requests (highest ids) held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            eval_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: usize,
    /// Rank of the meta-generated transform; 0 selects the full-rank head.
    pub rank: usize,
    pub tower_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub embedding_std: f64,
    pub max_behaviors: usize,
    pub geohash_prefix: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embedding_dim: 4,
            rank: 4,
            tower_widths: vec![32, 16, 8],
            leaky_slope: basm_core::stabt::DEFAULT_LEAKY_SLOPE,
            embedding_std: 0.05,
            max_behaviors: 20,
            geohash_prefix: 4,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab: &VocabFile, sample: &Impression) -> Result<ModelConfig> {
        let schema = Schema::from_vocab(
            vocab,
            &observed_slots(sample),
            self.embedding_dim,
            self.max_behaviors,
            self.geohash_prefix,
        )?;
        let mut cfg = ModelConfig::new(schema).with_variant(self.variant);
        cfg.ststl_rank = match self.rank {
            0 => RankMode::Full,
            rank => RankMode::LowRank { rank },
        };
        cfg.tower_widths = self.tower_widths.clone();
        cfg.leaky_slope = self.leaky_slope;
        cfg.embedding_std = self.embedding_std;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub repeats: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { repeats: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub rows: usize,
    /// Take every `stride`-th history-bearing impression from the end of the data.
    pub stride: usize,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            eps: 3e-5,
            rows: 8,
            stride: 10,
            tolerance: 1e-4,
        }
    }
}

/// Copies every flag that was given onto the config field of the same name.
macro_rules! override_fields {
    ($args:expr, $cfg:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = &$args.$field {
            $cfg.$field = v.clone();
        })+
    };
}

pub fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| serde_json::to_value(v).ok().and_then(|j| j.as_str().map(|n| n == s)).unwrap_or(false))
        .ok_or_else(|| format!("unknown variant {s:?} (full, no_stael, no_ststl, no_stabt, static)"))
}

/// A matrix flag value: rows separated by `;`, entries by `,`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix(pub Vec<Vec<f64>>);

pub fn parse_matrix(s: &str) -> std::result::Result<Matrix, String> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}")))
                .collect()
        })
        .collect::<std::result::Result<_, _>>()
        .map(Matrix)
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset directory (dataset.jsonl, vocab.json).
    #[arg(long = "data")]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
}

impl DataArgs {
    pub fn apply(&self, cfg: &mut DataSection) {
        if let Some(d) = &self.dir {
            cfg.dir = Some(d.clone());
        }
        override_fields!(self, cfg, eval_fraction);
    }
}

#[derive(Args, Debug, Default)]
pub struct GenArgs {
    #[arg(long)]
    pub time_periods: Option<u32>,
    #[arg(long)]
    pub cities: Option<u32>,
    #[arg(long)]
    pub users: Option<u32>,
    #[arg(long)]
    pub items: Option<u32>,
    #[arg(long)]
    pub categories: Option<u32>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub bias_amp: Option<f64>,
    #[arg(long)]
    pub field_amp: Option<f64>,
    /// Field-importance matrix, e.g. "1,0.5,0.3,0.1;0.1,1,0.5,0.3".
    #[arg(long, value_parser = parse_matrix)]
    pub phi: Option<Matrix>,
    #[arg(long, value_delimiter = ',')]
    pub period_weights: Option<Vec<f64>>,
    #[arg(long)]
    pub zipf_exponent: Option<f64>,
    #[arg(long)]
    pub cells_per_city: Option<u32>,
    #[arg(long)]
    pub home_cell_prob: Option<f64>,
    #[arg(long)]
    pub preferred_draw_prob: Option<f64>,
    #[arg(long)]
    pub combine_buckets: Option<u32>,
    #[arg(long)]
    pub max_behaviors: Option<usize>,
    #[arg(long)]
    pub geohash_prefix: Option<usize>,
    #[arg(long)]
    pub geohash_buckets: Option<u32>,
    #[arg(long)]
    pub impressions_per_request: Option<u32>,
    #[arg(long)]
    pub requests: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GenArgs {
    pub fn apply(&self, cfg: &mut GenConfig) {
        override_fields!(
            self,
            cfg,
            time_periods,
            cities,
            users,
            items,
            categories,
            latent_dim,
            bias_amp,
            field_amp,
            period_weights,
            zipf_exponent,
            cells_per_city,
            home_cell_prob,
            preferred_draw_prob,
            combine_buckets,
            max_behaviors,
            geohash_prefix,
            geohash_buckets,
            impressions_per_request,
            requests,
            seed,
        );
        if let Some(p) = &self.phi {
            cfg.phi = p.0.clone();
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Meta-transform rank; 0 for full rank.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub tower_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub leaky_slope: Option<f64>,
    #[arg(long)]
    pub embedding_std: Option<f64>,
    #[arg(long = "model-max-behaviors", id = "model_max_behaviors")]
    pub max_behaviors: Option<usize>,
    #[arg(long = "model-geohash-prefix", id = "model_geohash_prefix")]
    pub geohash_prefix: Option<usize>,
    /// full, no_stael, no_ststl, no_stabt or static.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long = "model-seed", id = "model_seed")]
    pub seed: Option<u64>,
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut ModelSection) {
        override_fields!(
            self,
            cfg,
            embedding_dim,
            rank,
            tower_widths,
            leaky_slope,
            embedding_std,
            max_behaviors,
            geohash_prefix,
            variant,
            seed,
        );
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub adagrad_init: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long = "train-seed", id = "train_seed")]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        override_fields!(
            self,
            cfg,
            batch_size,
            lr_start,
            lr_peak,
            warmup_steps,
            total_steps,
            adagrad_init,
            eval_every,
            seed,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, FileConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg: FileConfig = toml::from_str(
            "run_dir = \"out\"\n[model]\nrank = 0\nvariant = \"no_stael\"\n[train]\ntotal_steps = 5\n[generate]\nrequests = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.model.rank, 0);
        assert_eq!(cfg.model.variant, Variant::NoStael);
        assert_eq!(cfg.train.total_steps, 5);
        assert_eq!(cfg.generate.requests, 9);
        assert!(toml::from_str::<FileConfig>("[train]\nsteps = 5\n").is_err());
    }

    #[test]
    fn flags_override_only_what_is_given() {
        let mut t = TrainConfig::default();
        TrainArgs {
            lr_peak: Some(0.5),
            ..TrainArgs::default()
        }
        .apply(&mut t);
        assert_eq!(t.lr_peak, 0.5);
        assert_eq!(t.total_steps, TrainConfig::default().total_steps);
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_matrix("1,0.5;0, 2").unwrap(), Matrix(vec![vec![1.0, 0.5], vec![0.0, 2.0]]));
        assert!(parse_matrix("1,x").is_err());
        assert_eq!(parse_variant("no_stabt").unwrap(), Variant::NoStabt);
        assert!(parse_variant("none").is_err());
    }
}

//! Settings for training on generated data at a single-core budget.

use crate::error::Result;
use crate::features::Schema;
use crate::model::ModelConfig;
use crate::ststl::RankMode;
use crate::synthgen::GenConfig;

use super::optim::TrainConfig;

/// Model layout matching the fields and vocabulary that `gen` produces.
pub fn model_config_for(gen: &GenConfig, embedding_dim: usize) -> Result<ModelConfig> {
    gen.validate()?;
    let schema = Schema::from_vocab(
        &gen.vocab(),
        &gen.slots(),
        embedding_dim,
        gen.max_behaviors,
        gen.geohash_prefix,
    )?;
    Ok(ModelConfig::new(schema))
}

/// Small model used for the planted-bias, ablation and gate experiments:
/// `D = 4`, rank-4 meta transform, tower `[32, 16, 8]`.
pub fn experiment_model_config(gen: &GenConfig) -> Result<ModelConfig> {
    let mut cfg = model_config_for(gen, 4)?;
    cfg.ststl_rank = RankMode::LowRank { rank: 4 };
    cfg.tower_widths = vec![32, 16, 8];
    Ok(cfg)
}

/// 2000 steps of 256 rows. The peak rate is higher and the accumulator start much
/// lower than the library defaults, which are tuned for runs ten times longer.
pub fn experiment_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        lr_start: 0.001,
        lr_peak: 0.05,
        warmup_steps: 200,
        total_steps: 2000,
        adagrad_init: 1e-6,
        eval_every: 0,
        seed: 0,
    }
}

//! Training, checkpointing, evaluation and the ablation and heatmap drivers.

mod checkpoint;
mod evaluate;
mod experiment;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use evaluate::{
    ablate, ablation_csv, evaluate, export_gate_heatmap, gate_log, gate_recovery, gradcheck_model, history_batch, heatmap_csv, score,
    split_by_request, summarize, train_variant, AblationRow, AblationRun, HeatmapRow, EVAL_CHUNK,
};
pub use experiment::{experiment_model_config, experiment_train_config, model_config_for};
pub use optim::{lr_at, Adagrad, TrainConfig, ADAGRAD_EPS};
pub use train::{curve_csv, train, train_step, CurvePoint, TrainOutcome};

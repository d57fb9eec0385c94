//! `basm`: generate synthetic click data, train and evaluate the model, run the
//! ablation table, check gradients and export gate heatmaps.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{DataArgs, GenArgs, ModelArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "basm", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `runs/<subcommand>`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with planted context effects.
    Generate(GenArgs),
    /// Train one model and evaluate it on the held-out requests.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Metrics of a predictions CSV, or of a checkpoint on a dataset.
    Evaluate {
        /// CSV with request_id, time_period_id, city_id, label, score [, item_id].
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Score the whole dataset instead of the held-out requests.
        #[arg(long)]
        all: bool,
    },
    /// Train the full model and its four ablations with identical budgets.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        repeats: Option<u64>,
    },
    /// Finite-difference check of every parameter on one training batch.
    Gradcheck {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Check a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Mean gate value per (time-period, field) and (city, field).
    ExportHeatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Only the held-out requests instead of the whole dataset.
        #[arg(long)]
        eval_only: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck { .. } => "gradcheck",
            Command::ExportHeatmap { .. } => "export-heatmap",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("basm: {} error: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}

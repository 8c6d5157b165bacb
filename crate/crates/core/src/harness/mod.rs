//! Experiment runner: configuration, single runs, evaluation, the strategy
//! comparison grid and SVG plots.

mod compare;
mod config;
mod plots;
mod run;

pub use compare::{build_grid, compare, Cell, ComparisonRow, COMPOSITE_DEGRADATION};
pub use config::{
    DatasetSection, ExperimentConfig, GridSection, ModelSection, RecognizerKind, RunSection, CLASSIFIER_CLASSES,
    SEGMENTER_CLASSES,
};
pub use plots::{collect_csvs, cosine_histogram, emit_plots, read_metrics_rows, MetricsRow, COSINE_BINS};
pub use run::{
    build_datasets, evaluate, load_checkpoints, run_experiment, run_seed, save_checkpoints, AbortInfo, DatasetInfo,
    MetricsStats, RunSummary, SeedOutcome, ARTIFACT_VERSION,
};

use crate::engine::EngineError;
use crate::losses::LossError;
use crate::nn::ModelError;
use crate::synthdata::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("malformed csv {path}: {reason}")]
    Csv { path: String, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration problems, 3 for a
    /// numerical abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Engine(EngineError::Config(_)) => 2,
            HarnessError::Engine(EngineError::NumericalAbort { .. }) => 3,
            _ => 1,
        }
    }
}

//! Gradient extraction, cosine gating, training strategies and the optimizer.

mod adam;
mod gate;
mod record;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamState, OptimConfig};
pub use gate::{
    combine_gradients, combine_gradients_multi, cosine_similarity, descent_check, joint_direction, GateMode,
    GateOutcome, DESCENT_TOLERANCE, MIN_NORM,
};
pub use record::{read_step_records, write_step_records, StepRecord, STEP_COLUMNS};
pub use train::{
    build_task_graph, compute_task_gradients, enhance, epoch_batches, recognize, train_epoch, train_step,
    warmup_and_pretrain, Batch, Recognizer, TaskGradients, TaskGraph, TrainState,
};

use crate::autodiff::AutodiffError;
use crate::losses::{LossError, PixelLoss};
use crate::nn::ModelError;
use crate::synthdata::SynthError;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    Config(String),
    #[error("gradient lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numerical abort at step {step}: {reason}")]
    NumericalAbort { step: usize, reason: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training rule for the enhancer/recognizer pair.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Enhancer alone on the pixel loss.
    None,
    /// Recognizer alone, fed the degraded input directly.
    RecognizerOnly,
    /// `g_ip + λ·g_vr` always; recognizer trained too.
    Joint,
    /// `g_ip + λ·g_vr` always; recognizer parameters fixed.
    Frozen,
    /// Cosine-gated auxiliary gradient.
    #[default]
    #[serde(rename = "gradprom")]
    GradProm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::RecognizerOnly,
        Strategy::Joint,
        Strategy::Frozen,
        Strategy::GradProm,
    ];

    /// Trains the enhancer against an auxiliary recognizer.
    pub fn uses_auxiliary(self) -> bool {
        matches!(self, Strategy::Joint | Strategy::Frozen | Strategy::GradProm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::RecognizerOnly => "recognizer_only",
            Strategy::Joint => "joint",
            Strategy::Frozen => "frozen",
            Strategy::GradProm => "gradprom",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            EngineError::Config(format!(
                "unknown strategy {s:?} (expected none, recognizer_only, joint, frozen or gradprom)"
            ))
        })
    }
}

/// Recognition loss on the enhanced image.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Match the recognizer's outputs on the clean image.
    Unsupervised,
    /// Cross-entropy against labels or masks.
    #[default]
    Supervised,
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Unsupervised => "unsupervised",
            Supervision::Supervised => "supervised",
        })
    }
}

impl FromStr for Supervision {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unsupervised" => Ok(Supervision::Unsupervised),
            "supervised" => Ok(Supervision::Supervised),
            _ => Err(EngineError::Config(format!(
                "unknown supervision {s:?} (expected unsupervised or supervised)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub gate_mode: GateMode,
    pub supervision: Supervision,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub vr_pretrain_epochs: usize,
    /// Train the recognizer during the task phase (joint and gated rules).
    pub update_vr_params: bool,
    pub pixel_loss: PixelLoss,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::GradProm,
            gate_mode: GateMode::Hard,
            supervision: Supervision::Supervised,
            lambda: 1e-4,
            warmup_epochs: 1,
            vr_pretrain_epochs: 2,
            update_vr_params: true,
            pixel_loss: PixelLoss::Mse,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EngineError::Config(format!(
                "lambda {} must be finite and ≥ 0",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether the recognizer parameters change during the task phase.
    pub fn trains_recognizer(&self) -> bool {
        match self.strategy {
            Strategy::RecognizerOnly => true,
            Strategy::Joint | Strategy::GradProm => self.update_vr_params,
            Strategy::None | Strategy::Frozen => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("gradprm".parse::<Strategy>().is_err());
        assert_eq!("cosine_scaled".parse::<GateMode>().unwrap(), GateMode::CosineScaled);
        assert_eq!(
            "unsupervised".parse::<Supervision>().unwrap(),
            Supervision::Unsupervised
        );
    }
}

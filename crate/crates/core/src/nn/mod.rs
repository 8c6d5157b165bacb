//! Desk-scale enhancer and recognizer networks.

pub mod checkpoint;
mod models;
mod params;

pub use models::{
    check_params, enhancer_forward, identity_enhancer_params, init_params, recognizer_forward, ModelConfig, ModelRole,
};
pub use params::{BoundParams, GradientVector, ParameterSet};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape: {0}")]
    Shape(String),
    #[error("parameters: {0}")]
    Params(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Deterministic synthetic scenes with labels and masks, the degradation
//! pipeline, augmentation, and dataset persistence.

mod augment;
mod dataset;
mod degrade;
mod pnm;
mod scene;

pub use augment::{augment, AugmentConfig};
pub use dataset::{
    load_dataset, make_dataset, make_sample, make_split, write_dataset, Dataset, Manifest, ManifestEntry, Split,
};
pub use degrade::{blur_kernel, degrade, Degradation};
pub use pnm::{read_pnm, write_mask_pgm, write_pnm, Pnm};
pub use scene::{generate_scene, Distribution, Scene, SceneConfig};

use crate::autodiff::{AutodiffError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image {h}×{w} is not divisible by {gamma}")]
    NotDivisible { h: usize, w: usize, gamma: usize },
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One training or evaluation instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Clean image, `C×H×W` in `[0, 1]`.
    pub clean: Tensor,
    /// Degraded image; `C×H/γ×W/γ` when the pipeline downsamples.
    pub degraded: Tensor,
    /// Number of blobs minus one.
    pub label: usize,
    /// Per-pixel class, `H×W`: 0 background, 1 lesion.
    pub mask: Vec<u8>,
    pub sample_seed: u64,
}

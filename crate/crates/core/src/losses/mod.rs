//! Training losses for the enhancer and the recognizer, plus evaluation
//! metrics.

mod metrics;

pub use metrics::{accuracy, miou, psnr, ssim, MetricsRecord, SegConfusion, PSNR_CAP_DB};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::nn::{recognizer_forward, BoundParams, ModelConfig, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{what}: shape {left:?} does not match {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("target {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("image {h}×{w} is smaller than the {window}×{window} SSIM window")]
    ImageTooSmall { h: usize, w: usize, window: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PixelLoss {
    Mse,
    L1,
}

/// Mean pixel-wise loss between enhancer output and clean target.
pub fn pixel_loss(tape: &mut Tape, kind: PixelLoss, pred: Var, target: Var) -> Result<Var, LossError> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(LossError::ShapeMismatch {
            what: "pixel_loss",
            left: tape.shape(pred).to_vec(),
            right: tape.shape(target).to_vec(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let per_pixel = match kind {
        PixelLoss::Mse => tape.mul(diff, diff)?,
        PixelLoss::L1 => tape.abs(diff)?,
    };
    Ok(tape.mean(per_pixel)?)
}

/// Targets for a cross-entropy loss.
#[derive(Copy, Clone, Debug)]
pub enum CeTarget<'a> {
    /// One class id per image; logits are `N×C`.
    ImageLevel(&'a [usize]),
    /// One class id per pixel in `N×H×W` order; logits are `N×K×H×W`.
    PixelLevel(&'a [usize]),
}

/// Mean negative log-likelihood of the targets under softmax(logits).
pub fn ce_loss(tape: &mut Tape, logits: Var, target: CeTarget<'_>) -> Result<Var, LossError> {
    let shape = tape.shape(logits).to_vec();
    let (n, classes, plane, labels) = match (target, shape.as_slice()) {
        (CeTarget::ImageLevel(labels), &[n, c]) => (n, c, 1, labels),
        (CeTarget::PixelLevel(masks), &[n, k, h, w]) => (n, k, h * w, masks),
        _ => {
            return Err(LossError::ShapeMismatch {
                what: "ce_loss logits",
                left: shape,
                right: vec![],
            })
        }
    };
    if labels.len() != n * plane {
        return Err(LossError::ShapeMismatch {
            what: "ce_loss targets",
            left: vec![labels.len()],
            right: vec![n * plane],
        });
    }
    let mut one_hot = vec![0.0; n * classes * plane];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(LossError::LabelOutOfRange { label, classes });
        }
        let (b, px) = (i / plane, i % plane);
        one_hot[(b * classes + label) * plane + px] = 1.0;
    }
    let log_probs = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(Tensor::new(&shape, one_hot)?);
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / (n * plane) as f64)?)
}

/// Unsupervised recognition loss: MSE between the recognizer's outputs on the
/// enhanced and the clean images. The clean branch is a constant target.
pub fn unsup_vr_loss(
    tape: &mut Tape,
    vr_params: &BoundParams,
    enhanced: Var,
    clean: Var,
    config: &ModelConfig,
) -> Result<Var, LossError> {
    if tape.shape(enhanced) != tape.shape(clean) {
        return Err(LossError::ShapeMismatch {
            what: "unsup_vr_loss",
            left: tape.shape(enhanced).to_vec(),
            right: tape.shape(clean).to_vec(),
        });
    }
    let on_enhanced = recognizer_forward(tape, vr_params, enhanced, config)?;
    let on_clean = recognizer_forward(tape, vr_params, clean, config)?;
    let target = tape.detach(on_clean);
    pixel_loss(tape, PixelLoss::Mse, on_enhanced, target)
}

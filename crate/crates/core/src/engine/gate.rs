use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::GradientVector;

use super::EngineError;

/// Norms below this make the cosine undefined; it is reported as 0.
pub const MIN_NORM: f64 = 1e-12;
/// Tolerance of the descent check on `⟨d, g_ip⟩`.
pub const DESCENT_TOLERANCE: f64 = 1e-9;

/// How an auxiliary gradient is admitted into the enhancer update.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// All of `λ·g_vr` when `s ≥ 0`, nothing otherwise.
    #[default]
    Hard,
    /// `λ·g_vr·max(0, s)`.
    CosineScaled,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Hard => "hard",
            GateMode::CosineScaled => "cosine_scaled",
        })
    }
}

impl FromStr for GateMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(GateMode::Hard),
            "cosine_scaled" => Ok(GateMode::CosineScaled),
            _ => Err(EngineError::Config(format!(
                "unknown gate mode {s:?} (expected hard or cosine_scaled)"
            ))),
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), EngineError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(EngineError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `⟨a, b⟩ / (‖a‖·‖b‖)`, or 0 when either norm is below [`MIN_NORM`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, EngineError> {
    same_len(a, b)?;
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na < MIN_NORM || nb < MIN_NORM {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gate decision for one auxiliary gradient.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct GateOutcome {
    pub cosine: f64,
    pub open: bool,
}

/// Gates each auxiliary gradient independently against `g_ip` and adds the
/// admitted parts, in list order, to a copy of `g_ip`.
pub fn combine_gradients_multi(
    g_ip: &[f64],
    g_vr: &[&[f64]],
    lambda: f64,
    mode: GateMode,
) -> Result<(GradientVector, Vec<GateOutcome>), EngineError> {
    if !(lambda >= 0.0) {
        return Err(EngineError::Config(format!("lambda {lambda} must be ≥ 0")));
    }
    let mut d = g_ip.to_vec();
    let mut outcomes = Vec::with_capacity(g_vr.len());
    for g in g_vr {
        let s = cosine_similarity(g_ip, g)?;
        let open = s >= 0.0;
        match mode {
            GateMode::Hard if open => d.iter_mut().zip(g.iter()).for_each(|(di, gi)| *di += lambda * gi),
            GateMode::Hard => {}
            GateMode::CosineScaled => {
                let w = s.max(0.0);
                d.iter_mut().zip(g.iter()).for_each(|(di, gi)| *di += lambda * gi * w);
            }
        }
        outcomes.push(GateOutcome { cosine: s, open });
    }
    Ok((GradientVector::new(d), outcomes))
}

/// Single-auxiliary form of [`combine_gradients_multi`].
pub fn combine_gradients(
    g_ip: &[f64],
    g_vr: &[f64],
    lambda: f64,
    mode: GateMode,
) -> Result<(GradientVector, GateOutcome), EngineError> {
    let (d, outcomes) = combine_gradients_multi(g_ip, &[g_vr], lambda, mode)?;
    Ok((d, outcomes[0]))
}

/// Ungated sum `g_ip + Σ λ·g_vr_k`, accumulated in the same order as the gated
/// form so that an all-open gate reproduces it bit for bit.
pub fn joint_direction(g_ip: &[f64], g_vr: &[&[f64]], lambda: f64) -> Result<GradientVector, EngineError> {
    let mut d = g_ip.to_vec();
    for g in g_vr {
        same_len(g_ip, g)?;
        d.iter_mut().zip(g.iter()).for_each(|(di, gi)| *di += lambda * gi);
    }
    Ok(GradientVector::new(d))
}

/// `⟨d, g_ip⟩`; non-negative for every admissible update direction.
pub fn descent_check(d: &[f64], g_ip: &[f64]) -> Result<f64, EngineError> {
    same_len(d, g_ip)?;
    Ok(dot(d, g_ip))
}

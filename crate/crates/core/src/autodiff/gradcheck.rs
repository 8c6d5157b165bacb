use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

/// Which coordinates of each input tensor get a finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to `per_tensor` distinct coordinates per input, drawn from `seed`.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates dropped because a ±step probe crossed a relu/abs kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<(f64, Vec<bool>), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if !value.is_scalar() {
        return Err(AutodiffError::NonScalarLoss(value.shape().to_vec()));
    }
    Ok((value.item(), tape.kink_pattern()))
}

/// Compares reverse-mode gradients of a scalar function of several tensors
/// with central differences.
///
/// Relative error is `|numeric − analytic| / max(1, |analytic|)`. A coordinate
/// whose `±step` probes change the sign pattern of any relu/abs input is
/// skipped, since the function is not differentiable across that kink.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    coords: Coordinates,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base_pattern = tape.kink_pattern();
    drop(tape);

    let mut rng = match coords {
        Coordinates::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    let mut report = GradCheckReport::default();
    let mut probe = points.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = points[t].numel();
        let selected: Vec<usize> = match (coords, rng.as_mut()) {
            (Coordinates::Sample { per_tensor, .. }, Some(rng)) if per_tensor < n => {
                let mut idx = index::sample(rng, n, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for i in selected {
            let original = points[t].data()[i];
            let mut shifted = |delta: f64| -> Result<(f64, Vec<bool>), AutodiffError> {
                let mut data = points[t].data().to_vec();
                data[i] = original + delta;
                probe[t] = Tensor::new(points[t].shape(), data)?;
                evaluate(&f, &probe)
            };
            let (up, up_pattern) = shifted(step)?;
            let (down, down_pattern) = shifted(-step)?;
            probe[t] = points[t].clone();
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (numeric - a).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-tensor form of [`grad_check_many`] over every coordinate; returns the
/// maximum relative error.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        Coordinates::All,
    )?;
    Ok(report.max_rel_error)
}

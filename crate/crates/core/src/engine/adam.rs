use serde::{Deserialize, Serialize};

use crate::nn::ParameterSet;

use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(EngineError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step along `direction` (a gradient, so parameters
/// move against it).
pub fn adam_update(
    params: &ParameterSet,
    direction: &[f64],
    state: &AdamState,
    optim: &OptimConfig,
) -> Result<(ParameterSet, AdamState), EngineError> {
    let values = params.flatten_values();
    if direction.len() != values.len() || state.m.len() != values.len() {
        return Err(EngineError::LengthMismatch {
            left: values.len(),
            right: direction.len(),
        });
    }
    let t = state.t + 1;
    let c1 = 1.0 - optim.beta1.powi(t as i32);
    let c2 = 1.0 - optim.beta2.powi(t as i32);
    let mut m = Vec::with_capacity(values.len());
    let mut v = Vec::with_capacity(values.len());
    let mut updated = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let g = direction[i];
        let mi = optim.beta1 * state.m[i] + (1.0 - optim.beta1) * g;
        let vi = optim.beta2 * state.v[i] + (1.0 - optim.beta2) * g * g;
        let step = optim.lr * (mi / c1) / ((vi / c2).sqrt() + optim.epsilon);
        m.push(mi);
        v.push(vi);
        updated.push(values[i] - step);
    }
    if !updated.iter().all(|x| x.is_finite()) {
        return Err(EngineError::NonFinite("adam update".into()));
    }
    Ok((params.with_values(&updated)?, AdamState { m, v, t }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn params(v: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![("p".into(), Tensor::new(&[v.len()], v.to_vec()).unwrap())]).unwrap()
    }

    #[test]
    fn zero_direction_from_rest_leaves_params() {
        let p = params(&[0.5, -0.25]);
        let (q, s) = adam_update(&p, &[0.0, 0.0], &AdamState::new(2), &OptimConfig::default()).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_direction_decays_moments() {
        let p = params(&[0.0]);
        let state = AdamState {
            m: vec![1.0],
            v: vec![4.0],
            t: 3,
        };
        let opt = OptimConfig::default();
        let (_, s) = adam_update(&p, &[0.0], &state, &opt).unwrap();
        assert_eq!(s.m, vec![0.9]);
        assert_eq!(s.v, vec![4.0 * 0.999]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let p = params(&[1.0, 1.0, 1.0]);
        let opt = OptimConfig::default();
        let (q, _) = adam_update(&p, &[0.3, -2.0, 1e-3], &AdamState::new(3), &opt).unwrap();
        let moved: Vec<f64> = q.flatten_values().iter().map(|v| v - 1.0).collect();
        for (d, sign) in moved.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - sign * opt.lr).abs() < 1e-4 * opt.lr, "{d}");
        }
    }

    #[test]
    fn deterministic() {
        let p = params(&[0.1, 0.2]);
        let s = AdamState::new(2);
        let opt = OptimConfig::default();
        assert_eq!(
            adam_update(&p, &[1.0, -1.0], &s, &opt).unwrap(),
            adam_update(&p, &[1.0, -1.0], &s, &opt).unwrap()
        );
    }
}

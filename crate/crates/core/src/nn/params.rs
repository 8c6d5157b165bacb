use std::collections::BTreeMap;
use std::ops::Deref;

use crate::autodiff::{Gradients, Tape, Tensor, Var};

use super::ModelError;

/// Named parameter tensors in architecture-definition order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

/// All parameter gradients of a model concatenated into one vector, in
/// [`ParameterSet`] order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for GradientVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for GradientVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(ModelError::Params(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    /// Parameter values concatenated in order.
    pub fn flatten_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Concatenates per-parameter gradients in order; parameters missing from
    /// `grads` contribute zeros.
    pub fn flatten_grads(&self, grads: &BTreeMap<String, Tensor>) -> Result<GradientVector, ModelError> {
        let mut out = Vec::with_capacity(self.numel());
        for (name, t) in &self.entries {
            match grads.get(name) {
                Some(g) if g.shape() == t.shape() => out.extend_from_slice(g.data()),
                Some(g) => {
                    return Err(ModelError::Params(format!(
                        "gradient for {name} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        t.shape()
                    )))
                }
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        Ok(GradientVector(out))
    }

    /// Splits a flat vector back into named tensors shaped like `self`.
    pub fn unflatten(&self, v: &[f64]) -> Result<BTreeMap<String, Tensor>, ModelError> {
        Ok(self.with_values(v)?.entries.into_iter().collect())
    }

    /// A parameter set with the same names and shapes holding `v`.
    pub fn with_values(&self, v: &[f64]) -> Result<ParameterSet, ModelError> {
        if v.len() != self.numel() {
            return Err(ModelError::Params(format!(
                "vector of length {} does not match {} parameters",
                v.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let n = t.numel();
            entries.push((name.clone(), Tensor::new(t.shape(), v[offset..offset + n].to_vec())?));
            offset += n;
        }
        Ok(ParameterSet { entries })
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`ParameterSet`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps handles already recorded on a tape, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of one backward sweep with respect to these parameters.
    pub fn gradient(&self, grads: &Gradients, params: &ParameterSet) -> GradientVector {
        let mut out = Vec::with_capacity(params.numel());
        for (i, &v) in self.vars.iter().enumerate() {
            match grads.data(v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, params.tensor(i).numel())),
            }
        }
        GradientVector(out)
    }
}

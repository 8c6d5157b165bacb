use std::fmt;

use super::AutodiffError;

/// Dense row-major array of `f64` values.
///
/// Tensors are immutable once built. Every constructor rejects non-finite
/// data, so a `Tensor` in hand always holds finite numbers.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(AutodiffError::invalid("tensor", "zero-sized dimension"));
        }
        if expected != data.len() {
            return Err(AutodiffError::invalid(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor without validating finiteness. Callers must have
    /// checked the element count.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self, AutodiffError> {
        Self::new(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data under a new shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, AutodiffError> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, AutodiffError> {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

/// Splits a 3- or 4-d image shape into `(n, c, h, w)`. A 3-d shape is a
/// single image.
pub(crate) fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize), AutodiffError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(AutodiffError::invalid(
            op,
            format!("expected C×H×W or N×C×H×W, got {shape:?}"),
        )),
    }
}

/// Rebuilds a shape with the same rank as `like` from `(n, c, h, w)`.
pub(crate) fn image_shape(like: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(&[1], vec![f64::NAN]),
            Err(AutodiffError::NonFinite { .. })
        ));
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.5).unwrap();
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 3.5);
    }
}

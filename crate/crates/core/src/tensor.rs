//! Dense row-major tensor of 64-bit floats.
//!
//! This is the universal value carrier: video volumes `(c, t, h, w)`,
//! signals `(n,)`, weight blocks and scalars all live in the same type.
//! Gradients are an optional flat array of the same length, populated by
//! [`crate::tape::Tape::backward`].

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` accounts for every element
    /// and that no value is NaN or infinite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "tensor",
                format!("non-finite value {} at flat index {}", data[pos], pos),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Uniform values in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    /// Fan-in-scaled uniform init (He-style): `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Self::rand_uniform(rng, shape, -bound, bound)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    /// Shape as `(c, t, h, w)`, the feature-map layout.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [c, t, h, w] => Ok((c, t, h, w)),
            _ => Err(Error::dim(op, format!("expected rank-4 map, got shape {:?}", self.shape))),
        }
    }

    pub fn dims5(&self, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d, e] => Ok((a, b, c, d, e)),
            _ => Err(Error::dim(op, format!("expected rank-5 tensor, got shape {:?}", self.shape))),
        }
    }

    pub(crate) fn has_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(4.25);
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 4.25);
        assert_eq!(t.numel(), 1);
    }
}

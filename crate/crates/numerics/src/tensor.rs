use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;

/// Immutable dense row-major tensor.
///
/// The payload sits behind an `Arc`, so clones are cheap and a tensor can be
/// shared read-only across threads.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(NumericsError::DataLength { shape, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Unchecked constructor used by graph primitives, which run their own
    /// finiteness check.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data: Arc::new(data), requires_grad: false }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![S::zero(); numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![S::one(); numel(shape)])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: S) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::from_parts(shape.to_vec(), data)
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Copy-on-write access to the payload.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<S> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data), requires_grad: self.requires_grad })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.as_f64())).collect()),
            requires_grad: self.requires_grad,
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Byte-exact content fingerprint input (shape then payload).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * S::DTYPE.size() + 8 * self.rank());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in self.data.iter() {
            v.write_le(&mut out);
        }
        out
    }
}

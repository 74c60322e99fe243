use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", alloc::format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); numel], grad: None, requires_grad: false }
    }

    /// A zero-initialised trainable parameter.
    pub fn parameter(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.requires_grad = true;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                alloc::format!("gradient of length {} for tensor {:?}", g.len(), self.shape),
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![S::zero(); g.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite()) && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion to another precision; the gradient is dropped.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }
}

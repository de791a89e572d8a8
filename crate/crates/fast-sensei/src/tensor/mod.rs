//! Dense row-major tensors with reverse-mode autodiff.
//!
//! The numeric element type is generic so the same code runs in f32 for
//! training and inference and in f64 for gradient checking. Kernels live in
//! [`kernels`] as plain functions over tensors; [`tape::Tape`] records the
//! same operations for backpropagation.

pub mod fdcheck;
pub mod kernels;
pub mod quant;
pub mod tape;

use crate::error::{Error, Result};

/// Element type for all numeric code: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::NumCast
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. The shape is a list of strictly positive dims;
/// `data.len()` always equals the product of the dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::from_vec", format!("bad shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Builds a tensor by calling `f` with each flat (row-major) index.
    pub fn from_flat_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::shape("Tensor::item", format!("numel {} != 1", self.data.len())));
        }
        Ok(self.data[0])
    }

    /// Element at a full multi-index; panics on rank or bounds mismatch.
    /// Convenience for tests and small lookups, not for hot loops.
    pub fn at(&self, idx: &[usize]) -> S {
        assert_eq!(idx.len(), self.shape.len(), "rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for dim {i} of size {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Same shape on both tensors or a ShapeMismatch naming the op.
pub(crate) fn check_same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn at_uses_row_major_layout() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn cast_round_trips_represented_values() {
        let t = Tensor::from_vec(&[3], vec![0.5f32, -1.25, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }

    #[test]
    fn max_abs_and_finite() {
        let t = Tensor::from_vec(&[4], vec![-3.0f32, 1.0, 2.5, -0.5]).unwrap();
        assert_eq!(t.max_abs(), 3.0);
        assert!(t.all_finite());
        let bad = Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        assert!(!bad.all_finite());
    }
}

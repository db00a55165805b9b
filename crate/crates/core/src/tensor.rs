//! Dense row-major tensors.
//!
//! The working precision is `f32` everywhere on the forward and backward
//! path. Attack budgets are multiples of 1/255, far above `f32` resolution on
//! `[0, 1]`, so nothing is gained from doubles there. The element type is
//! still generic so finite-difference oracles can replay the exact same
//! computation in `f64`.
//!
//! A `Tensor` is a plain immutable value. Tape linkage lives in
//! [`crate::autodiff::Var`], which names a node whose value is a `Tensor`.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type of a tensor.
pub trait Real: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Converts a shared `f32` tensor, reusing the allocation when `Self` is `f32`.
    fn lift(t: &Arc<Tensor<f32>>) -> Arc<Tensor<Self>>;

    /// `c = a b + beta c` for an `[m, k]` by `[k, n]` product; each operand
    /// is described by its row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self], rsc: isize);
}

fn check_extent<T>(data: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < data.len(), "gemm operand out of bounds");
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn lift(t: &Arc<Tensor<f32>>) -> Arc<Tensor<f32>> {
        Arc::clone(t)
    }

    fn gemm(m: usize, k: usize, n: usize, a: (&[f32], isize, isize), b: (&[f32], isize, isize), beta: f32, c: &mut [f32], rsc: isize) {
        check_extent(a.0, m, k, a.1, a.2);
        check_extent(b.0, k, n, b.1, b.2);
        check_extent(c, m, n, rsc, 1);
        // SAFETY: the extents of all three operands were checked above.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), rsc, 1);
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn lift(t: &Arc<Tensor<f32>>) -> Arc<Tensor<f64>> {
        Arc::new(t.cast())
    }

    fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), beta: f64, c: &mut [f64], rsc: isize) {
        check_extent(a.0, m, k, a.1, a.2);
        check_extent(b.0, k, n, b.1, b.2);
        check_extent(c, m, n, rsc, 1);
        // SAFETY: the extents of all three operands were checked above.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), rsc, 1);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is already known to match `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor. Panics on an empty vector.
    pub fn vector(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "vector tensors need at least one element");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::op(
                op,
                format!("expected a rank-2 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())),
        )
    }
}

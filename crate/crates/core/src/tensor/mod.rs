//! Dense row-major tensors, a tape-based reverse-mode autodiff graph and a
//! central-difference gradient verifier.
//!
//! Everything is generic over [`Float`] so the same model code trains in
//! `f32` and is gradient-checked in `f64`.

mod gradcheck;
mod graph;
mod params;
pub(crate) mod kernels;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use graph::{Binding, Grads, Graph, Var};
pub use params::Params;

/// Epsilon used by every RMS normalization in the stack.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("last axis has zero length")]
    EmptyAxis,
    #[error("row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

/// Floating point element type supported by the substrate.
pub trait Float:
    num_like::Real + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` over strided views.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be
    /// in bounds of the pointed-to allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Minimal arithmetic surface the kernels need; implemented for f32 and f64.
pub(crate) mod num_like {
    use std::ops::{Add, Div, Mul, Neg, Sub};

    pub trait Real:
        Copy
        + PartialOrd
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn sqrt(self) -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn tanh(self) -> Self;
        fn abs(self) -> Self;
        fn is_finite(self) -> bool;
        fn max(self, other: Self) -> Self;
        fn neg_infinity() -> Self;
    }

    macro_rules! real {
        ($t:ty) => {
            impl Real for $t {
                fn zero() -> Self {
                    0.0
                }
                fn one() -> Self {
                    1.0
                }
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                fn tanh(self) -> Self {
                    <$t>::tanh(self)
                }
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                fn neg_infinity() -> Self {
                    <$t>::NEG_INFINITY
                }
            }
        };
    }
    real!(f32);
    real!(f64);
}

pub use num_like::Real;

impl Float for f32 {
    const DTYPE: DType = DType::Float32;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::Float64;

    fn lit(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for a 0-d shape).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            d => self.data.len() / d,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// RMS normalization over the last axis: `x / sqrt(mean(x²) + 1e-6) ⊙ scale`.
pub fn layer_norm<T: Float>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 || x.shape.is_empty() {
        return Err(TensorError::EmptyAxis);
    }
    if scale.numel() != d {
        return Err(TensorError::Shape {
            op: "layer_norm",
            detail: format!("scale has {} elements, last axis is {d}", scale.numel()),
        });
    }
    let mut out = vec![T::zero(); x.numel()];
    let mut inv = vec![T::zero(); x.rows()];
    kernels::rms_norm(&x.data, &scale.data, d, &mut out, &mut inv);
    Tensor::new(x.shape.clone(), out)
}

/// Softmax over the last axis. Masked (`false`) positions come out exactly 0.
pub fn softmax<T: Float>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let k = x.last_dim();
    if k == 0 || x.shape.is_empty() {
        return Err(TensorError::EmptyAxis);
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(TensorError::Shape {
                op: "softmax",
                detail: format!("mask has {} entries for {} values", m.len(), x.numel()),
            });
        }
    }
    let mut out = x.data.clone();
    for (r, row) in out.chunks_mut(k).enumerate() {
        let row_mask = mask.map(|m| &m[r * k..(r + 1) * k]);
        if !kernels::softmax_row(row, |j| row_mask.is_none_or(|m| m[j])) {
            return Err(TensorError::FullyMasked { row: r });
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn element_count_is_checked() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[2, 0, 4]).numel(), 0);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let x = Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let y = layer_norm(&x, &one).unwrap().to_f64_vec();
        let r = (12.5f64 + 1e-6).sqrt();
        assert!(close(&y, &[3.0 / r, 4.0 / r], 1e-12));
        assert!(close(&y, &[0.8485, 1.1314], 1e-4));

        let z = Tensor::<f64>::zeros(&[2]);
        assert_eq!(layer_norm(&z, &one).unwrap().to_f64_vec(), vec![0.0, 0.0]);

        let t = Tensor::<f64>::from_f64(&[2], &[2.0, 2.0]).unwrap();
        assert!(close(&layer_norm(&t, &one).unwrap().to_f64_vec(), &[1.0, 1.0], 1e-6));
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let x = Tensor::<f32>::zeros(&[3, 0]);
        let s = Tensor::<f32>::zeros(&[0]);
        assert_eq!(layer_norm(&x, &s), Err(TensorError::EmptyAxis));
    }

    #[test]
    fn layer_norm_is_scale_invariant_up_to_eps() {
        let s = Tensor::<f64>::full(&[3], 1.0);
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let x2 = Tensor::<f64>::from_f64(&[3], &[2.0, -4.0, 1.0]).unwrap();
        let a = layer_norm(&x, &s).unwrap();
        let b = layer_norm(&x2, &s).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        assert!(close(&softmax(&x, None).unwrap().to_f64_vec(), &[0.5, 0.5], 1e-12));

        let x = Tensor::<f64>::from_f64(&[2], &[1f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(&softmax(&x, None).unwrap().to_f64_vec(), &[0.25, 0.75], 1e-12));

        let x = Tensor::<f64>::from_f64(&[2], &[5.0, 7.0]).unwrap();
        let y = softmax(&x, Some(&[true, false])).unwrap();
        assert_eq!(y.to_f64_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let x = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = softmax(&x, Some(&[true, true, false, false])).unwrap_err();
        assert_eq!(err, TensorError::FullyMasked { row: 1 });
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f32>::from_f64(&[3], &[1000.0, 1001.0, 999.0]).unwrap();
        let y = softmax(&x, None).unwrap();
        assert!(y.is_finite());
        let s: f32 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ops_are_bit_reproducible() {
        let x = Tensor::<f32>::from_f64(&[2, 3], &[0.1, -0.7, 2.5, 3.3, 0.0, -1.25]).unwrap();
        let s = Tensor::<f32>::from_f64(&[3], &[0.5, 1.5, -1.0]).unwrap();
        assert_eq!(layer_norm(&x, &s).unwrap(), layer_norm(&x, &s).unwrap());
        assert_eq!(softmax(&x, None).unwrap(), softmax(&x, None).unwrap());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
                let rows = vals.len() / cols;
                prop_assume!(rows > 0);
                let x = Tensor::<f64>::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
                let y = softmax(&x, None).unwrap();
                for r in 0..rows {
                    let s: f64 = y.row(r).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn layer_norm_ignores_positive_rescaling(vals in prop::collection::vec(-5.0f64..5.0, 4), k in 1.0f64..10.0) {
                let norm: f64 = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assume!(norm >= 1.0);
                let s = Tensor::<f64>::full(&[4], 1.0);
                let x = Tensor::<f64>::new(vec![4], vals.clone()).unwrap();
                let y = Tensor::<f64>::new(vec![4], vals.iter().map(|v| v * k).collect()).unwrap();
                prop_assert!(layer_norm(&x, &s).unwrap().max_abs_diff(&layer_norm(&y, &s).unwrap()) < 1e-5);
            }
        }
    }
}

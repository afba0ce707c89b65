//! Slice-level numeric kernels shared by the pure tensor ops and the graph.

use super::{Float, NORM_EPS};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major `[rows, cols]`.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn max_index(&self) -> Option<usize> {
        if self.rows == 0 || self.cols == 0 {
            return None;
        }
        Some(self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs)
    }
}

/// `c[offset..]` viewed as strided `[rows, cols]`.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c = a·b + (accumulate ? c : 0)`.
pub fn gemm<T: Float>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: MatMut<'_, T>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    let c_max = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(c_max < c.data.len(), "gemm output out of bounds");
    if a.cols == 0 {
        if !accumulate {
            for i in 0..c.rows {
                for j in 0..c.cols {
                    c.data[c.offset + i * c.rs + j * c.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(a.max_index().is_some_and(|m| m < a.data.len()), "gemm lhs out of bounds");
    assert!(b.max_index().is_some_and(|m| m < b.data.len()), "gemm rhs out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Row-wise RMS norm; writes the per-row reciprocal RMS into `inv_rms`.
pub fn rms_norm<T: Float>(x: &[T], scale: &[T], d: usize, out: &mut [T], inv_rms: &mut [T]) {
    let eps = T::lit(NORM_EPS);
    let dn = T::lit(d as f64);
    for ((xr, or), inv) in x.chunks(d).zip(out.chunks_mut(d)).zip(inv_rms.iter_mut()) {
        let ms = xr.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let r = T::one() / (ms + eps).sqrt();
        *inv = r;
        for ((o, &v), &s) in or.iter_mut().zip(xr).zip(scale) {
            *o = v * r * s;
        }
    }
}

/// In-place masked softmax of one row. Returns false if every position is masked.
pub fn softmax_row<T: Float>(row: &mut [T], allowed: impl Fn(usize) -> bool) -> bool {
    let mut max = T::neg_infinity();
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            any = true;
            max = max.max(v);
        }
    }
    if !any {
        return false;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    true
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

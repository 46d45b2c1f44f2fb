//! Dense row-major matrices and the scalar trait the network is generic over.
//!
//! Training runs in `f32`; gradient checking instantiates the same code with
//! `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover every
                // (row, col) addressed by the given shapes and strides; all
                // call sites live in this module and derive strides from
                // `Mat` dimensions.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        let cols = data.len();
        Mat::from_vec(1, cols, data)
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<T: Real>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: S) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm_acc(self, false, other, false, &mut out, S::zero());
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat<S>) -> Mat<S> {
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm_acc(self, false, other, true, &mut out, S::zero());
        out
    }

    pub fn transpose(&self) -> Mat<S> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut total = S::zero();
    for i in chunks * 8..a.len() {
        total += a[i] * b[i];
    }
    acc.iter().fold(total, |s, &x| s + x)
}

#[inline]
pub fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = op(a) · op(b) + beta · out`, where `op` optionally transposes.
///
/// Single-row operands are handled with plain vector loops; packing-based
/// GEMM is a poor fit for the per-timestep products of a recurrence.
pub fn gemm_acc<S: Real>(a: &Mat<S>, ta: bool, b: &Mat<S>, tb: bool, out: &mut Mat<S>, beta: S) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(out.shape(), (m, n), "output shape");
    if beta != S::one() {
        if beta == S::zero() {
            out.data.iter_mut().for_each(|x| *x = S::zero());
        } else {
            out.scale_assign(beta);
        }
    }
    if m == 1 && !ta {
        // x (1×k) · B
        let x = &a.data;
        if tb {
            // B stored n×k: out[j] += dot(x, B[j,:])
            for j in 0..n {
                out.data[j] += dot(x, b.row(j));
            }
        } else {
            for (p, &xp) in x.iter().enumerate() {
                if xp != S::zero() {
                    axpy(xp, b.row(p), &mut out.data);
                }
            }
        }
        return;
    }
    if ta && !tb && k == 1 {
        // outer product aᵀ(m×1) · b(1×n)
        for i in 0..m {
            let ai = a.data[i];
            if ai != S::zero() {
                axpy(ai, &b.data, out.row_mut(i));
            }
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    S::gemm(
        m,
        k,
        n,
        S::one(),
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        S::one(),
        &mut out.data,
        n as isize,
        1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.as_mut_slice()[i * b.cols() + j] = s;
            }
        }
        out
    }

    fn seq(rows: usize, cols: usize, offset: f64) -> Mat<f64> {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i as f64 + offset) * 0.37).sin()).collect(),
        )
    }

    #[test]
    fn gemm_variants_match_naive_product() {
        for &(m, k, n) in &[(1, 7, 5), (4, 3, 6), (9, 17, 1), (1, 1, 1)] {
            let a = seq(m, k, 0.0);
            let b = seq(k, n, 3.0);
            let expect = naive(&a, &b);
            let got = a.matmul(&b);
            for (x, y) in got.as_slice().iter().zip(expect.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
            let got_t = a.matmul_t(&b.transpose());
            for (x, y) in got_t.as_slice().iter().zip(expect.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
            let mut via_ta = Mat::zeros(m, n);
            gemm_acc(&a.transpose(), true, &b, false, &mut via_ta, 0.0);
            for (x, y) in via_ta.as_slice().iter().zip(expect.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let expect: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), expect);
    }
}

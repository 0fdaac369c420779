//! Dense row-major matrices and the scalar nonlinearities used throughout.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64`. Everything numeric is therefore generic over [`Scalar`].

use crate::error::{Error, Result};

/// Floating-point scalar the whole stack is generic over.
///
/// `f32` is the training precision, `f64` the verification precision.
pub trait Scalar:
    num_traits::Float
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::fmt::Debug
    + core::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_val(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64_val(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64_val(self) -> f64 {
        self
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        // exp(x) <= 1 here, so no overflow
        let e = x.exp();
        e / (one + e)
    }
}

/// SiLU activation `x * sigmoid(x)`.
#[inline]
pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

/// Derivative of SiLU: `s + x * s * (1 - s)` with `s = sigmoid(x)`.
#[inline]
pub fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s + x * s * (F::one() - s)
}

/// SiLU derivative when `sigmoid(x)` is already known.
#[inline]
pub fn silu_grad_from_sigmoid<F: Scalar>(x: F, s: F) -> F {
    s + x * s * (F::one() - s)
}

/// Dense matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Default for Matrix<F> {
    fn default() -> Self {
        Matrix::zeros(0, 0)
    }
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    /// Builds a matrix from row-major data; length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::config("ragged rows in matrix literal".to_string()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill(&mut self, v: F) {
        self.data.fill(v);
    }

    /// Reshapes in place; total element count must be preserved.
    pub fn reshape(&mut self, rows: usize, cols: usize) -> Result<()> {
        if rows * cols != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {}x{} into {}x{}",
                self.rows, self.cols, rows, cols
            )));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other * scale`
    pub fn add_scaled(&mut self, other: &Matrix<F>, scale: F) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    pub fn l1_norm(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v.abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product with deterministic row-major accumulation.
    pub fn matmul(&self, other: &Matrix<F>) -> Result<Matrix<F>> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<F> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Round-trips every entry through `f64` (used when switching precisions).
    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64_val())).collect(),
        }
    }
}

/// `out = a * b`; shapes must already agree.
pub fn matmul_into<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, out: &mut Matrix<F>) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    out.fill(F::zero());
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

/// `out += a^T * b` (used for weight gradients without materializing transposes).
pub fn matmul_at_b_accum<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, out: &mut Matrix<F>) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let a_row = &a.data[k * a.cols..(k + 1) * a.cols];
        let b_row = &b.data[k * n..(k + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += aki * b_row[j];
            }
        }
    }
}

/// `out += a * b^T`.
pub fn matmul_a_bt_accum<F: Scalar>(a: &Matrix<F>, b: &Matrix<F>, out: &mut Matrix<F>) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    for i in 0..a.rows {
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        let out_row = &mut out.data[i * b.rows..(i + 1) * b.rows];
        for j in 0..b.rows {
            let b_row = &b.data[j * b.cols..(j + 1) * b.cols];
            let mut acc = F::zero();
            for k in 0..a.cols {
                acc += a_row[k] * b_row[k];
            }
            out_row[j] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]])
            .unwrap();
        let i3 = Matrix::identity(3);
        assert_eq!(i3.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_checked() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::seeded(7, 0);
        let a = crate::rng::random_matrix::<f64>(&mut rng, 5, 7, 1.0);
        let b = crate::rng::random_matrix::<f64>(&mut rng, 7, 3, 1.0);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "message should carry shapes: {err}");
    }

    #[test]
    fn matmul_associativity_random_triples() {
        let mut rng = crate::rng::seeded(11, 0);
        for _ in 0..10 {
            let a = crate::rng::random_matrix::<f64>(&mut rng, 4, 6, 1.0);
            let b = crate::rng::random_matrix::<f64>(&mut rng, 6, 5, 1.0);
            let c = crate::rng::random_matrix::<f64>(&mut rng, 5, 3, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert_relative_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        // sigmoid(-ln 3) = 1/(1+3) = 0.25
        assert_relative_eq!(sigmoid(-(3.0f64.ln())), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_symmetry() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            assert_relative_eq!(sigmoid(x) + sigmoid(-x), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn silu_values_and_grad() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(20.0f64) - 20.0).abs() < 1e-6);
        // central finite difference at 0.7
        let h = 1e-6;
        let fd = (silu(0.7 + h) - silu(0.7 - h)) / (2.0 * h);
        assert_relative_eq!(silu_grad(0.7f64), fd, epsilon = 1e-8);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = crate::rng::seeded(3, 0);
        let a = crate::rng::random_matrix::<f64>(&mut rng, 4, 7, 1.0);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn accum_helpers_match_explicit_transposes() {
        let mut rng = crate::rng::seeded(5, 0);
        let a = crate::rng::random_matrix::<f64>(&mut rng, 4, 6, 1.0);
        let b = crate::rng::random_matrix::<f64>(&mut rng, 4, 3, 1.0);
        let mut out = Matrix::zeros(6, 3);
        matmul_at_b_accum(&a, &b, &mut out);
        let expect = a.transpose().matmul(&b).unwrap();
        for (x, y) in out.data().iter().zip(expect.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }

        let c = crate::rng::random_matrix::<f64>(&mut rng, 5, 6, 1.0);
        let mut out2 = Matrix::zeros(4, 5);
        matmul_a_bt_accum(&a, &c, &mut out2);
        let expect2 = a.matmul(&c.transpose()).unwrap();
        for (x, y) in out2.data().iter().zip(expect2.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }
}

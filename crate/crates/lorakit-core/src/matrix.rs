//! Dense row-major `f64` matrices.
//!
//! [`Matrix`] is the universal value type of the crate: model weights,
//! activations, low-rank factors, and gradients are all plain dense
//! matrices. Products are delegated to `matrixmultiply`'s GEMM kernels;
//! the transposed variants ([`Matrix::matmul_nt`], [`Matrix::matmul_tn`])
//! use stride views so no operand is ever copied.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;
use crate::fmath;
use crate::Result;

/// Dense 2-D array of 64-bit floats, row-major.
///
/// Invariant: `data.len() == rows * cols`, and both dimensions are
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Matrix with every entry set to `value`.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    /// Builds a matrix from row-major data; the length must match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(CoreError::InvalidDimensions(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended
    /// for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix entry by entry from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Samples every entry i.i.d. from `N(0, sigma^2)`.
    pub fn randn(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in &mut m.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = sigma * z;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of scalar entries.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Row `i` as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Flat row-major view of the entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consumes the matrix and returns its row-major storage.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CoreError::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            [self.cols as isize, 1],
            &other.data,
            [other.cols as isize, 1],
            &mut out.data,
        );
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(CoreError::shape("matmul_nt", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            [self.cols as isize, 1],
            &other.data,
            [1, other.cols as isize],
            &mut out.data,
        );
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(CoreError::shape("matmul_tn", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            [1, self.cols as isize],
            &other.data,
            [other.cols as isize, 1],
            &mut out.data,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(CoreError::shape("add", self.shape(), other.shape()));
        }
        let mut out = self.clone();
        for (o, r) in out.data.iter_mut().zip(&other.data) {
            *o += r;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(CoreError::shape("sub", self.shape(), other.shape()));
        }
        let mut out = self.clone();
        for (o, r) in out.data.iter_mut().zip(&other.data) {
            *o -= r;
        }
        Ok(out)
    }

    /// Entrywise scaling by a constant.
    pub fn scale(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= factor;
        }
        out
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CoreError::shape("axpy", self.shape(), other.shape()));
        }
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
        Ok(())
    }

    /// Copies columns `[start, start + len)` into a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        assert!(len > 0 && start + len <= self.cols, "column slice out of range");
        let mut out = Matrix::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    /// Copies rows `[start, start + len)` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        assert!(len > 0 && start + len <= self.rows, "row slice out of range");
        let mut out = Matrix::zeros(len, self.cols);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(self.row(start + i));
        }
        out
    }

    /// Concatenates matrices side by side; all must share a row count.
    pub fn concat_cols(parts: &[&Matrix]) -> Matrix {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                out.row_mut(i)[at..at + p.cols].copy_from_slice(p.row(i));
                at += p.cols;
            }
        }
        out
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn concat_rows(parts: &[&Matrix]) -> Matrix {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows column mismatch");
            for i in 0..p.rows {
                out.row_mut(at + i).copy_from_slice(p.row(i));
            }
            at += p.rows;
        }
        out
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        fmath::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// True when every entry is finite (no NaN, no infinities).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strided GEMM: `c += a * b` with `c` assumed zeroed, shapes `m x k`,
/// `k x n`, `m x n`. Strides are `[row, col]` element strides, which lets
/// callers pass transposed views for free.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: [isize; 2],
    b: &[f64],
    b_strides: [isize; 2],
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    // Safety: shapes and strides are validated by the callers above; every
    // index touched is `i*rs + j*cs` with `i < m`, `j < k` (resp. `k, n`),
    // which stays inside the operand slices for both the natural and the
    // transposed stride layouts.
    #[allow(unsafe_code)]
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides[0],
            a_strides[1],
            b.as_ptr(),
            b_strides[0],
            b_strides[1],
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    /// Independent triple-loop product used as the reference oracle.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let i2 = Matrix::identity(2);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[0,1],[0,0]] * [1,2]^T = [2,0]^T
        let a = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let h = a.matmul(&x).unwrap();
        assert_eq!(h, Matrix::from_rows(&[&[2.0], &[0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = seeded_rng(7);
        let a = Matrix::randn(5, 3, 1.0, &mut rng);
        let b = Matrix::randn(3, 4, 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        match err {
            CoreError::ShapeMismatch { lhs_rows: 2, lhs_cols: 3, rhs_rows: 4, rhs_cols: 2, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = seeded_rng(11);
        let a = Matrix::randn(4, 6, 1.0, &mut rng);
        let b = Matrix::randn(5, 6, 1.0, &mut rng);
        let nt = a.matmul_nt(&b).unwrap();
        let want = matmul_oracle(&a, &b.transpose());
        assert!(nt.max_abs_diff(&want) <= 1e-12);

        let c = Matrix::randn(6, 4, 1.0, &mut rng);
        let d = Matrix::randn(6, 5, 1.0, &mut rng);
        let tn = c.matmul_tn(&d).unwrap();
        let want = matmul_oracle(&c.transpose(), &d);
        assert!(tn.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn frobenius_norm_cases() {
        assert_eq!(Matrix::zeros(3, 4).frobenius_norm(), 0.0);
        // 3-4-5 triple
        let m = Matrix::from_rows(&[&[3.0, 4.0]]);
        assert_eq!(m.frobenius_norm(), 5.0);
        // random matrix vs independent accumulation
        let mut rng = seeded_rng(3);
        let m = Matrix::randn(6, 7, 2.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                acc += m.get(i, j) * m.get(i, j);
            }
        }
        assert!((m.frobenius_norm() - acc.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Matrix::randn(3, 3, 1.0, &mut seeded_rng(42));
        let b = Matrix::randn(3, 3, 1.0, &mut seeded_rng(42));
        assert_eq!(a, b);
        let c = Matrix::randn(3, 3, 1.0, &mut seeded_rng(43));
        assert!(a.max_abs_diff(&c) > 0.0);
    }
}

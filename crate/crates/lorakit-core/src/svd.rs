//! Thin singular value decomposition via one-sided Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of the working matrix with
//! plane rotations; the column norms converge to the singular values and
//! the accumulated rotations form the right singular vectors. It is slow
//! compared to bidiagonalization methods but simple, deterministic, and
//! accurate to near machine precision — the right trade-off for the
//! matrix sizes this crate analyzes (up to a few hundred on a side).

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::Result;

/// Convergence threshold on the normalized column dot product.
const OFF_DIAG_TOL: f64 = 1e-12;

/// Singular values below `max_sigma * RANK_TOL` are treated as zero when
/// forming left singular vectors (their columns are completed to an
/// orthonormal basis instead of normalized).
const RANK_TOL: f64 = 1e-13;

/// Thin SVD `input = U * diag(S) * V^T` with `p = min(rows, cols)`.
///
/// `U` is `rows x p` and `V` is `cols x p`, both with orthonormal columns;
/// `S` is non-negative and sorted non-increasing. The sign of each column
/// pair is fixed so the largest-magnitude entry of every `U` column is
/// non-negative, which makes the factorization unique for distinct
/// singular values and lets tests compare exact outputs.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// Rebuilds `U * diag(S) * V^T`; used by reconstruction checks.
    pub fn reconstruct(&self) -> Matrix {
        let p = self.s.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for j in 0..p {
                let v = us.get(i, j) * self.s[j];
                us.set(i, j, v);
            }
        }
        us.matmul_nt(&self.v).expect("factor shapes agree")
    }

    /// The first `r` left singular vectors as a `rows x r` matrix.
    pub fn u_top(&self, r: usize) -> Matrix {
        self.u.slice_cols(0, r)
    }

    /// The first `r` right singular vectors as a `cols x r` matrix.
    pub fn v_top(&self, r: usize) -> Matrix {
        self.v.slice_cols(0, r)
    }
}

/// Computes the thin SVD of `m`.
///
/// Errors with [`CoreError::NoConvergence`] if the rotation sweeps do not
/// settle within the cap (10 * n^2 sweeps for n columns), and with
/// [`CoreError::Contract`] on non-finite input.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.all_finite() {
        return Err(CoreError::Contract("svd input must be finite".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // Factor the transpose and swap the roles of U and V.
        let t = svd_tall(&m.transpose())?;
        Ok(SvdResult { u: t.v, s: t.s, v: t.u })
    }
}

/// One-sided Jacobi for `rows >= cols`.
fn svd_tall(input: &Matrix) -> Result<SvdResult> {
    let rows = input.rows();
    let cols = input.cols();
    let mut work = input.clone();
    let mut v = Matrix::identity(cols);

    let max_sweeps = 10 * cols * cols;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = column_moments(&work, p, q);
                if gamma == 0.0 || gamma.abs() <= OFF_DIAG_TOL * fmath::sqrt(alpha * beta) {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + fmath::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / fmath::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_columns(&mut work, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CoreError::NoConvergence { op: "svd", iterations: sweeps });
    }

    // Column norms are the singular values; sort them non-increasing.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..rows {
                let x = work.get(i, j);
                acc += x * x;
            }
            fmath::sqrt(acc)
        })
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = s.first().copied().unwrap_or(0.0);

    let mut u = Matrix::zeros(rows, cols);
    let mut v_sorted = Matrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..cols {
            v_sorted.set(i, dst, v.get(i, src));
        }
        if s[dst] > sigma_max * RANK_TOL && s[dst] > 0.0 {
            let inv = 1.0 / s[dst];
            for i in 0..rows {
                u.set(i, dst, work.get(i, src) * inv);
            }
        }
        // Columns for (numerically) zero singular values are filled below.
    }
    let s: Vec<f64> = s
        .iter()
        .map(|&x| if x > sigma_max * RANK_TOL { x } else { 0.0 })
        .collect();
    complete_zero_columns(&mut u, &s);
    fix_signs(&mut u, &mut v_sorted);

    Ok(SvdResult { u, s, v: v_sorted })
}

fn column_moments(m: &Matrix, p: usize, q: usize) -> (f64, f64, f64) {
    let cols = m.cols();
    let data = m.data();
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    let mut ip = p;
    let mut iq = q;
    for _ in 0..m.rows() {
        let a = data[ip];
        let b = data[iq];
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
        ip += cols;
        iq += cols;
    }
    (alpha, beta, gamma)
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let mut ip = p;
    let mut iq = q;
    for _ in 0..data.len() / cols {
        let a = data[ip];
        let b = data[iq];
        data[ip] = c * a - s * b;
        data[iq] = s * a + c * b;
        ip += cols;
        iq += cols;
    }
}

/// Replaces U columns belonging to zero singular values with deterministic
/// orthonormal completions (Gram-Schmidt against all earlier columns,
/// seeded from standard basis vectors).
fn complete_zero_columns(u: &mut Matrix, s: &[f64]) {
    let rows = u.rows();
    for j in 0..s.len() {
        if s[j] != 0.0 {
            continue;
        }
        let mut filled = false;
        for basis in 0..rows {
            let mut cand: Vec<f64> = (0..rows).map(|i| if i == basis { 1.0 } else { 0.0 }).collect();
            // Orthogonalize twice for numerical safety.
            for _ in 0..2 {
                for k in 0..j.max(0) {
                    let dot: f64 = (0..rows).map(|i| cand[i] * u.get(i, k)).sum();
                    for (i, c) in cand.iter_mut().enumerate() {
                        *c -= dot * u.get(i, k);
                    }
                }
            }
            let norm = fmath::sqrt(cand.iter().map(|x| x * x).sum());
            if norm > 0.5 {
                for (i, c) in cand.iter().enumerate() {
                    u.set(i, j, c / norm);
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "orthonormal completion always exists when rows >= cols");
    }
}

/// Forces the largest-magnitude entry of each U column non-negative,
/// flipping the matching V column to keep the product unchanged.
fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for j in 0..u.cols() {
        let mut best = 0.0_f64;
        let mut best_val = 0.0_f64;
        for i in 0..u.rows() {
            let x = u.get(i, j);
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
            for i in 0..v.rows() {
                let x = v.get(i, j);
                v.set(i, j, -x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn orthonormality_defect(m: &Matrix) -> f64 {
        let gram = m.matmul_tn(m).unwrap();
        let eye = Matrix::identity(gram.rows());
        gram.max_abs_diff(&eye)
    }

    fn check_invariants(m: &Matrix) {
        let r = svd(m).unwrap();
        assert!(orthonormality_defect(&r.u) <= 1e-9, "U not orthonormal");
        assert!(orthonormality_defect(&r.v) <= 1e-9, "V not orthonormal");
        for w in r.s.windows(2) {
            assert!(w[0] >= w[1], "singular values not sorted");
        }
        assert!(r.s.iter().all(|&x| x >= 0.0));
        let err = r.reconstruct().sub(m).unwrap().frobenius_norm();
        assert!(
            err <= 1e-8 * m.frobenius_norm().max(1.0),
            "reconstruction error {err} too large for {:?}",
            m.shape()
        );
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let r = svd(&m).unwrap();
        assert_eq!(r.s, alloc::vec![3.0, 1.0]);
        // U and V equal the identity up to column signs; the sign rule
        // makes them exactly the identity here.
        assert_eq!(r.u, Matrix::identity(2));
        assert_eq!(r.v, Matrix::identity(2));
    }

    #[test]
    fn rank_one_outer_product() {
        // u = (1.2, -1.6) has norm 2; v = (0.6, 0.8) has norm 1.
        let u = [1.2, -1.6];
        let v = [0.6, 0.8];
        let m = Matrix::from_fn(2, 2, |i, j| u[i] * v[j]);
        let r = svd(&m).unwrap();
        assert!((r.s[0] - 2.0).abs() <= 1e-12);
        assert!(r.s[1].abs() <= 1e-12);
        check_invariants(&m);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = seeded_rng(5);
        let m = Matrix::randn(6, 4, 1.0, &mut rng);
        check_invariants(&m);
    }

    #[test]
    fn wide_matrix_and_zero_matrix() {
        let mut rng = seeded_rng(9);
        let wide = Matrix::randn(3, 8, 1.0, &mut rng);
        check_invariants(&wide);
        let zero = Matrix::zeros(4, 3);
        let r = svd(&zero).unwrap();
        assert!(r.s.iter().all(|&x| x == 0.0));
        assert!(orthonormality_defect(&r.u) <= 1e-12);
    }

    #[test]
    fn determinism() {
        let mut rng = seeded_rng(17);
        let m = Matrix::randn(10, 7, 1.0, &mut rng);
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.s, b.s);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn invariants_on_many_random_matrices() {
        // Sweep of sizes up to 64x64, mixing tall, wide, and square.
        let mut rng = seeded_rng(123);
        let mut count = 0;
        while count < 1000 {
            let rows = 1 + (count * 7) % 64;
            let cols = 1 + (count * 13) % 64;
            let scale = [1e-3, 1.0, 1e3][count % 3];
            let m = Matrix::randn(rows, cols, scale, &mut rng);
            check_invariants(&m);
            count += 1;
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(svd(&m).is_err());
    }
}

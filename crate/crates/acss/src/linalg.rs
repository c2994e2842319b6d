//! Small shared linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Vector of n i.i.d. standard normal draws.
pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Eigenvalues of a symmetric matrix (the input is symmetrized first to
/// absorb roundoff asymmetry).
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
}

/// Minimum eigenvalue of a symmetric matrix; +inf for the 0×0 matrix so that
/// emptiness never fails a positive-definiteness gate.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigenvalues(m).min()
}

/// Log-determinant of a symmetric matrix, provided its minimum eigenvalue
/// exceeds `eig_tol`; `None` otherwise. The 0×0 matrix has determinant 1.
pub fn logdet_if_pd(m: &DMatrix<f64>, eig_tol: f64) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(0.0);
    }
    let eig = sym_eigenvalues(m);
    if eig.min() <= eig_tol {
        None
    } else {
        Some(eig.iter().map(|&l| l.ln()).sum())
    }
}

/// Solve A x = b for symmetric positive definite A. Exactly singular inputs
/// can slip through the factorization with a roundoff-sized positive pivot,
/// so the pivot spread is screened as a rank check.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{}x{} matrix is not positive definite", a.nrows(), a.ncols())))?;
    let diag = chol.l_dirty().diagonal();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &d in diag.iter() {
        lo = lo.min(d * d);
        hi = hi.max(d * d);
    }
    let x = chol.solve(b);
    if lo > hi * 1e-13 && x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(format!("{}x{} system is numerically singular", a.nrows(), a.ncols())))
    }
}

/// Largest eigenvalue of AᵀA (squared spectral norm of A) by power iteration.
/// Cheap and ample for step-size bounds.
pub fn spectral_norm_sq(a: &DMatrix<f64>, iters: usize) -> f64 {
    let d = a.ncols();
    if d == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a.transpose() * (a * &v);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w / norm;
    }
    lambda
}

/// Extract the subvector at `idx`.
pub fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Extract the principal submatrix at `idx × idx`.
pub fn gather_square(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// Rows of a matrix at `idx`, all columns.
pub fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logdet_matches_direct_determinant() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ld = logdet_if_pd(&m, 1e-12).unwrap();
        assert_relative_eq!(ld, (2.0f64 * 1.0 - 0.25).ln(), epsilon = 1e-12);
        assert_eq!(logdet_if_pd(&DMatrix::zeros(0, 0), 1e-12), Some(0.0));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(logdet_if_pd(&indef, 1e-12).is_none());
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let l = spectral_norm_sq(&a, 200);
        assert_relative_eq!(l, 9.0, max_relative = 1e-6);
    }

    #[test]
    fn spd_solve_roundtrip() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert_relative_eq!((a * x - b).norm(), 0.0, epsilon = 1e-12);
    }
}

//! Cholesky factorization with the crate-wide jitter policy.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative symmetry tolerance for matrices supplied by callers.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Factorization of a symmetric positive-definite matrix, possibly after
/// diagonal jitter was added to repair near-singularity.
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Jitter actually added to the diagonal (0.0 if none was needed).
    pub jitter: f64,
}

/// Factorize `matrix`, adding escalating diagonal jitter if needed.
///
/// Kernel Gram matrices are routinely near-singular, so a failed pivot is
/// repaired by adding `1e-10 * trace / n` to the diagonal, escalating by
/// factors of 10 up to `1e-6 * trace / n`. Beyond that the matrix is
/// reported as singular.
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: matrix.ncols(),
        });
    }
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok(JitteredCholesky { chol, jitter: 0.0 });
    }
    let base = matrix.trace() / n as f64;
    if !(base > 0.0) {
        return Err(Error::SingularScale { curve: None });
    }
    let mut eps = 1e-10;
    while eps <= 1e-6 {
        let mut jittered = matrix.clone();
        let jitter = eps * base;
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        eps *= 10.0;
    }
    Err(Error::SingularScale { curve: None })
}

/// Check symmetry within `SYMMETRY_TOL` relative to the largest entry, then
/// return the symmetrized matrix `(A + A^T) / 2`.
pub fn require_symmetric(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: matrix.ncols(),
        });
    }
    let scale = matrix.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidParameter {
                    reason: format!("matrix is not symmetric at ({i}, {j})"),
                });
            }
        }
    }
    let mut sym = matrix.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
        }
    }
    Ok(sym)
}

/// Quadratic form `v^T M^{-1} v` through the Cholesky factor.
pub fn quad_form(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    let mut w = v.clone();
    chol.l_dirty().solve_lower_triangular_mut(&mut w);
    w.norm_squared()
}

/// Log-determinant of the factorized matrix.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_repairs_rank_deficient_gram() {
        // Rank-one 3x3 matrix; raw Cholesky fails, jitter succeeds.
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let jc = cholesky_with_jitter(&m).unwrap();
        assert!(jc.jitter > 0.0);
        assert!(jc.jitter <= 1e-6 * m.trace() / 3.0);
    }

    #[test]
    fn zero_matrix_is_rejected() {
        let m = DMatrix::zeros(2, 2);
        assert!(matches!(
            cholesky_with_jitter(&m),
            Err(Error::SingularScale { .. })
        ));
    }

    #[test]
    fn quad_form_matches_dense_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let v = DVector::from_vec(vec![0.5, -1.2]);
        let jc = cholesky_with_jitter(&m).unwrap();
        let dense = (v.transpose() * m.try_inverse().unwrap() * &v)[(0, 0)];
        assert!((quad_form(&jc.chol, &v) - dense).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(require_symmetric(&m).is_err());
    }
}

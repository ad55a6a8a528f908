//! Small shared linear-algebra helpers: symmetrization, jittered
//! factorizations, angle wrapping.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Diagonal jitter added before factorizing a nominally PSD matrix.
pub const JITTER: f64 = 1e-10;

/// Condition-number limit beyond which a solve is reported as degenerate.
pub const MAX_CONDITION: f64 = 1e12;

/// Numerical degeneracy in a covariance operation.
#[derive(Debug, Error)]
pub enum DegeneracyError {
    #[error("matrix not positive definite after {JITTER:e} jitter")]
    NotPositiveDefinite,
    #[error("condition number {0:.3e} exceeds {MAX_CONDITION:e}")]
    IllConditioned(f64),
}

/// Replaces `m` with its symmetric part `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    debug_assert_eq!(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of `m`, falling back to `m + JITTER·I` when the plain
/// factorization fails.
///
/// The fallback keeps factorizations of collapsed covariances (e.g. right
/// after a step reset) well defined; healthy matrices factor exactly, which
/// preserves the no-information identities of the conditioning operations.
pub fn jittered_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>, DegeneracyError> {
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let n = m.nrows();
    let jittered = m + DMatrix::identity(n, n) * JITTER;
    nalgebra::Cholesky::new(jittered)
        .map(|c| c.l())
        .ok_or(DegeneracyError::NotPositiveDefinite)
}

/// Solves `m · X = rhs` for a symmetric PSD `m`, reporting degeneracy when
/// the conditioning of the jittered matrix exceeds [`MAX_CONDITION`]. The
/// solve itself uses the raw matrix whenever it factors.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, DegeneracyError> {
    let n = m.nrows();
    let jittered = m + DMatrix::identity(n, n) * JITTER;
    let eig = jittered.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min_ev <= 0.0 {
        return Err(DegeneracyError::NotPositiveDefinite);
    }
    let cond = max_ev / min_ev;
    if cond > MAX_CONDITION {
        return Err(DegeneracyError::IllConditioned(cond));
    }
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(chol.solve(rhs));
    }
    let chol = nalgebra::Cholesky::new(jittered).ok_or(DegeneracyError::NotPositiveDefinite)?;
    Ok(chol.solve(rhs))
}

/// Eigendecomposition `m = Q Λ Qᵀ` with the jitter policy; negative
/// eigenvalues under the jitter floor are clamped to zero.
pub fn spd_eigen(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>), DegeneracyError> {
    let n = m.nrows();
    let jittered = m + DMatrix::identity(n, n) * JITTER;
    let eig = jittered.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -JITTER {
            return Err(DegeneracyError::NotPositiveDefinite);
        }
        *v = v.max(0.0);
    }
    Ok((eig.eigenvectors, vals))
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * std::f64::consts::PI);
    if w > std::f64::consts::PI {
        w -= 2.0 * std::f64::consts::PI;
    }
    w
}

/// Smallest eigenvalue of a symmetric matrix; used by PSD assertions.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::MAX, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(0.0), 0.0);
        assert_relative_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        assert_relative_eq!(
            wrap_angle(-std::f64::consts::PI),
            std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI);
        for k in -10..10 {
            let a = 0.3 + k as f64 * 2.0 * std::f64::consts::PI;
            assert_relative_eq!(wrap_angle(a), 0.3, epsilon = 1e-9);
        }
    }

    #[test]
    fn symmetrize_fixes_asymmetry() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        symmetrize(&mut m);
        assert_relative_eq!(m[(0, 1)], 3.0);
        assert_relative_eq!(m[(1, 0)], 3.0);
    }

    #[test]
    fn spd_solve_rejects_ill_conditioned() {
        // Conditioning is judged after the jitter: a tiny eigenvalue alone
        // is acceptable, a huge spread is not.
        let ok = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-15]));
        assert!(spd_solve(&ok, &DMatrix::identity(2, 2)).is_ok());
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1e20, 1e-12]));
        assert!(matches!(
            spd_solve(&bad, &DMatrix::identity(2, 2)),
            Err(DegeneracyError::IllConditioned(_))
        ));
    }

    #[test]
    fn spd_solve_identity() {
        let m = DMatrix::<f64>::identity(3, 3) * 2.0;
        let rhs = DMatrix::identity(3, 3);
        let x = spd_solve(&m, &rhs).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.5, epsilon = 1e-9);
    }
}

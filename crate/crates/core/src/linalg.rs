//! Small dense linear-algebra helpers shared by the estimators and the
//! asymptotic formulas.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition-number ceiling for the `d_α × d_α` sandwich inverses.
pub const MAX_COND_SANDWICH: f64 = 1e10;
/// Condition-number ceiling for the optimal-weight-matrix inverses.
pub const MAX_COND_WEIGHT: f64 = 1e12;

/// 2-norm condition number from the singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a square matrix, refused when its condition number exceeds `max_cond`.
/// Returns the inverse together with the condition number.
pub fn inverse_checked(
    m: &DMatrix<f64>,
    max_cond: f64,
    what: &'static str,
) -> Result<(DMatrix<f64>, f64)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            what,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    let condition = condition_number(m);
    if !(condition <= max_cond) {
        return Err(Error::Singular { what, condition });
    }
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::Singular { what, condition })?;
    Ok((inv, condition))
}

/// `(M + M')/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(crate::math::abs(*v)))
}

/// Largest absolute entry of a vector.
pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(crate::math::abs(*x)))
}

/// Whether `lower ≼ upper` in the positive-semidefinite order, up to a
/// tolerance relative to the scale of `upper`. Also returns the smallest
/// eigenvalue of `upper - lower`.
pub fn psd_leq(lower: &DMatrix<f64>, upper: &DMatrix<f64>, rel_tol: f64) -> (bool, f64) {
    let diff = upper - lower;
    let min = min_eigenvalue(&diff);
    let scale = max_abs(upper).max(max_abs(lower)).max(f64::MIN_POSITIVE);
    (min >= -rel_tol * scale, min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![1.0, 1e-3]));
        assert!((condition_number(&m) - 1e3).abs() < 1e-6);
    }

    #[test]
    fn singular_matrix_is_refused() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            inverse_checked(&m, 1e10, "test"),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn psd_order() {
        let a = DMatrix::identity(2, 2);
        let b = a.clone() * 2.0;
        assert!(psd_leq(&a, &b, 1e-12).0);
        assert!(!psd_leq(&b, &a, 1e-12).0);
    }
}

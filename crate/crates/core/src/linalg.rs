//! Small dense helpers shared by the optimizer and the scorers.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry count as zero.
const PIVOT_RTOL: f64 = 1e-12;

/// `M·Mᵀ` for an `n x c` matrix.
pub(crate) fn gram(m: ArrayView2<'_, f64>) -> Array2<f64> {
    m.dot(&m.t())
}

/// Inverse of `G + δ·(tr G / n)·I` through a Cholesky factorization.
///
/// Fails with [`Error::SingularMatrix`] when the regularized matrix is not
/// numerically positive definite, which only happens for `δ = 0`.
pub(crate) fn regularized_inverse(gram: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let n = gram.nrows();
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::invalid(format!(
            "ridge must be a finite value >= 0, got {ridge}"
        )));
    }
    let shift = ridge_shift(gram, ridge);
    let max_diag = gram.diag().iter().cloned().fold(0.0_f64, f64::max);
    let reg = DMatrix::from_fn(n, n, |i, j| gram[[i, j]] + if i == j { shift } else { 0.0 });
    let chol = reg.cholesky().ok_or_else(|| {
        Error::SingularMatrix(format!("{n}x{n} Gram matrix is not positive definite"))
    })?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|p| p * p)
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::SingularMatrix(format!(
            "{n}x{n} Gram matrix is rank deficient (smallest pivot {min_pivot:e})"
        )));
    }
    let inv = chol.inverse();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)]))
}

/// The diagonal shift `δ·tr(G)/n` applied by [`regularized_inverse`].
pub(crate) fn ridge_shift(gram: &Array2<f64>, ridge: f64) -> f64 {
    ridge * gram.diag().sum() / gram.nrows() as f64
}

pub(crate) fn row_sq_norms(a: ArrayView2<'_, f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r))
}

/// Unit-normalizes every row in place; zero rows are an error.
pub(crate) fn normalize_rows(a: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!(
                "row {i} has zero norm and cannot be normalized"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Cosine similarity with the convention `cos(0, ·) = 0`.
pub(crate) fn cosine_from_parts(dot: f64, sq_norm_a: f64, sq_norm_b: f64) -> f64 {
    let denom = (sq_norm_a * sq_norm_b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Lower median of a non-empty slice.
pub(crate) fn median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    let mid = (buf.len() - 1) / 2;
    let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inverse_of_identity_gram() {
        let m = array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let inv = regularized_inverse(&gram(m.view()), 0.0).unwrap();
        assert!((inv[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((inv[[1, 1]] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn singular_without_ridge() {
        let m = array![[1.0, 2.0], [2.0, 4.0]];
        let g = gram(m.view());
        assert!(matches!(
            regularized_inverse(&g, 0.0),
            Err(Error::SingularMatrix(_))
        ));
        assert!(regularized_inverse(&g, 1e-6).is_ok());
    }

    #[test]
    fn lower_median() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
    }
}

//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CdcdError, Result};

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Modified Cholesky factorization `T S T^T = D` of a symmetric positive
/// definite matrix, with `T` unit lower triangular.
pub fn modified_cholesky(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = sigma.nrows();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| CdcdError::numerical("matrix is not positive definite"))?;
    let c = chol.l();
    let d = DVector::from_iterator(p, (0..p).map(|t| c[(t, t)] * c[(t, t)]));
    // L = C diag(1/c_tt) is unit lower triangular and T = L^{-1}.
    let mut l = c.clone();
    for j in 0..p {
        let s = c[(j, j)];
        for i in j..p {
            l[(i, j)] /= s;
        }
    }
    let t = l
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| CdcdError::numerical("singular Cholesky factor"))?;
    Ok((t, d))
}

/// Inverse of a symmetric positive definite matrix via Cholesky, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| CdcdError::numerical("matrix is not positive definite"))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Inverse of a symmetric matrix that may be indefinite or singular.
///
/// Returns the exact inverse when the matrix is numerically nonsingular and
/// the Moore-Penrose pseudo-inverse otherwise; the flag reports which one.
pub fn symmetric_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let p = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cutoff = max_abs * (p.max(1) as f64) * f64::EPSILON;
    let singular = eig.eigenvalues.iter().any(|v| v.abs() <= cutoff);
    let inv_vals = eig
        .eigenvalues
        .map(|v| if v.abs() <= cutoff { 0.0 } else { 1.0 / v });
    let mut inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    symmetrize(&mut inv);
    (inv, singular)
}

pub fn frobenius_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `n` log-spaced values from `hi` down to `hi * ratio`.
pub fn log_spaced_desc(hi: f64, ratio: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n)
            .map(|i| hi * ratio.powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

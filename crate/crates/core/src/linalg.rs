//! Small dense helpers on top of nalgebra shared by the numerical modules.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition of `(a + a^T) / 2`.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite eigenvalue".into()));
    }
    Ok(eig)
}

/// Rebuilds `U diag(f(λ)) U^T` from an eigendecomposition.
pub fn spectral_map(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let fj = f(lambda);
        scaled.column_mut(j).scale_mut(fj);
    }
    scaled * u.transpose()
}

/// Moore-Penrose inverse of a symmetric matrix; eigenvalues with
/// `|λ| <= rel_tol * max|λ|` are treated as zero.
pub fn sym_pinv(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(a)?;
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if lmax == 0.0 {
        return Ok(DMatrix::zeros(a.nrows(), a.ncols()));
    }
    let cut = rel_tol * lmax;
    Ok(spectral_map(&eig, |l| if l.abs() > cut { 1.0 / l } else { 0.0 }))
}

/// Ratio of the largest to the smallest eigenvalue magnitude of a symmetric
/// matrix (infinite when singular).
pub fn sym_condition(a: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eigen(a)?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l.abs());
        hi = hi.max(l.abs());
    }
    if lo == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(hi / lo)
    }
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(AB) = sum_ij A_ij B_ji
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

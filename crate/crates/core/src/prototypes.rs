//! Prototype recovery and scatter-matrix diagnostics for Euclidean features.
//!
//! With `Q = C(W)^{-1} W^T` the prototypes are the weighted means `F* = Q F`.
//! For a rounded labeling the scatter matrices take the matrix forms
//! `S_w = F^T (I − A_0) F / n` and `S_b = F^T (A_0 − 11^T/n) F / n`.

use nalgebra::{DMatrix, DVector};

use crate::affinity::FeatureSet;
use crate::error::{Error, Result};
use crate::selfassign;

/// Minimum eigenvalue of `S_w` for the separability ratio to be reported.
pub const SEPARABILITY_EIGEN_MIN: f64 = 1e-10;

/// Prototypes `f*_j` (rows) and the weights `C(W)^{-1} W^T` that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub protos: DMatrix<f64>,
    pub weights_used: DMatrix<f64>,
    /// Columns of `W` that survived (nonempty clusters).
    pub kept_columns: Vec<usize>,
}

/// `f*_j = Σ_i (C(W)^{-1} W^T)_{ji} f_i`; zero-mass columns are dropped.
pub fn recover_prototypes(w: &DMatrix<f64>, features: &FeatureSet) -> Result<PrototypeSet> {
    if w.nrows() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", features.len()),
            got: format!("{}", w.nrows()),
        });
    }
    let kept_columns: Vec<usize> = (0..w.ncols()).filter(|&j| w.column(j).sum() > 0.0).collect();
    if kept_columns.is_empty() {
        return Err(Error::InvalidInput("assignment matrix has no nonempty cluster".into()));
    }
    let n = w.nrows();
    let weights_used = DMatrix::from_fn(kept_columns.len(), n, |j, i| {
        let col = w.column(kept_columns[j]);
        col[i] / col.sum()
    });
    let protos = &weights_used * features.data();
    Ok(PrototypeSet { protos, weights_used, kept_columns })
}

/// Total, within- and between-class scatter for a labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterReport {
    pub st: DMatrix<f64>,
    pub sw: DMatrix<f64>,
    pub sb: DMatrix<f64>,
    /// `tr(S_w^{-1} S_b)` when `λ_min(S_w) > 1e-10`.
    pub separability: Option<f64>,
}

impl ScatterReport {
    /// `‖S_t − S_w − S_b‖_∞ / ‖S_t‖_∞`.
    pub fn decomposition_residual(&self) -> f64 {
        let r = (&self.st - &self.sw - &self.sb).amax();
        let scale = self.st.amax();
        if scale > 0.0 {
            r / scale
        } else {
            r
        }
    }
}

fn check_rows(w: &DMatrix<f64>, features: &FeatureSet) -> Result<()> {
    if w.nrows() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", features.len()),
            got: format!("{}", w.nrows()),
        });
    }
    Ok(())
}

/// Drops empty columns so that `A_0` is defined.
fn nonempty(w: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<usize> = (0..w.ncols()).filter(|&j| w.column(j).sum() > 0.0).collect();
    w.select_columns(&cols)
}

/// Scatter matrices in matrix form, using `A_0(W)` without forming it.
pub fn scatter_report(w: &DMatrix<f64>, features: &FeatureSet) -> Result<ScatterReport> {
    check_rows(w, features)?;
    let w = nonempty(w);
    let f = features.data();
    let n = f.nrows() as f64;
    let mean: DVector<f64> = f.row_sum().transpose() / n;
    let centered_sum = f.tr_mul(f) - &mean * mean.transpose() * n;
    let st = centered_sum / n;
    // F^T A_0 F = (W^T F)^T C^{-1} (W^T F)
    let wf = w.tr_mul(f);
    let cinv = DMatrix::from_diagonal(&DVector::from_iterator(w.ncols(), w.column_iter().map(|c| 1.0 / c.sum())));
    let fa0f = wf.transpose() * cinv * &wf;
    let sw = (f.tr_mul(f) - &fa0f) / n;
    let sb = (fa0f - &mean * mean.transpose() * n) / n;
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    let (st, sw, sb) = (sym(st), sym(sw), sym(sb));
    let separability = separability(&sw, &sb);
    Ok(ScatterReport { st, sw, sb, separability })
}

fn separability(sw: &DMatrix<f64>, sb: &DMatrix<f64>) -> Option<f64> {
    let eig = sw.clone().symmetric_eigen();
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lmin > SEPARABILITY_EIGEN_MIN) {
        return None;
    }
    let chol = sw.clone().cholesky()?;
    Some(chol.solve(sb).trace())
}

/// `(tr S_w, tr S_b, E_0)` with `E_0 = tr(A_0 F F^T)` for the linear kernel.
pub fn tr_sw_sb_link(w: &DMatrix<f64>, features: &FeatureSet) -> Result<(f64, f64, f64)> {
    let report = scatter_report(w, features)?;
    let w = nonempty(w);
    let a0 = selfassign::inverse_normalizer(&w, 0.0, selfassign::InversePolicy::Exact)?;
    let wf = w.tr_mul(features.data());
    let e0 = (wf.transpose() * a0 * &wf).trace();
    Ok((report.sw.trace(), report.sb.trace(), e0))
}

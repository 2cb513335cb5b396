//! Self-assignment matrices and the objective they induce.
//!
//! For an assignment matrix `W` (n × c) with column sums `c = W^T 1` and
//! Gram matrix `G = W^T W`:
//!
//! ```text
//! C(W)   = Diag(c)
//! γ_s(W) = C^{1/2} (C^{-1/2} G C^{-1/2})^s C^{1/2}      geodesic C → G in P^c
//! A_s(W) = W γ_s(W)^{-1} W^T
//! B(W)   = C^{-1} G
//! E_s(W) = tr(K A_s(W)) = tr(γ_s^{-1} W^T K W)
//! ```
//!
//! Everything that touches `n` goes through products `K W`, so a sketched
//! affinity never needs `n × n` storage. Dense `A_s` is only built on request.
//!
//! For `s ∈ (0, 1)` the gradient differentiates `M ↦ M^{-s}` with
//! `M = C^{-1/2} G C^{-1/2}` through its eigendecomposition: for
//! `M = U Λ U^T` the derivative in direction `H` is `U (Γ ∘ U^T H U) U^T`
//! with first divided differences `Γ_ij = (f(λ_i) − f(λ_j)) / (λ_i − λ_j)`.

use nalgebra::{DMatrix, DVector};

use crate::affinity::AffinityOperator;
use crate::error::{Error, Result};
use crate::linalg;

/// Condition number of `W^T W` beyond which the exact inverse is refused.
pub const COND_LIMIT: f64 = 1e12;

/// Lower clamp for the eigenvalues of `C^{-1/2} W^T W C^{-1/2}` before powering.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Relative eigenvalue gap below which divided differences become derivatives.
pub const DEGENERATE_GAP: f64 = 1e-10;

/// Relative cut used by the pseudo-inverse policy.
pub const PINV_TOL: f64 = 1e-12;

/// `n` above which [`self_assignment`] refuses to build a dense matrix.
pub const DENSE_LIMIT: usize = 2048;

/// How the inverse normalizer is formed when `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversePolicy {
    /// Regular inverse; rank deficiency is reported as an error.
    #[default]
    Exact,
    /// Moore–Penrose inverse on the numerically nonzero spectrum.
    Pseudo,
}

/// Parameters of the self-assignment objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfAssignParams {
    pub s: f64,
    pub rho: f64,
    pub c: usize,
}

impl SelfAssignParams {
    pub fn new(s: f64, rho: f64, c: usize) -> Result<Self> {
        check_s(s)?;
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
        }
        if c < 2 {
            return Err(Error::InvalidDimension(format!("need c >= 2, got {c}")));
        }
        Ok(Self { s, rho, c })
    }
}

/// Column masses and Gram matrix of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub cdiag: DVector<f64>,
    pub gram: DMatrix<f64>,
}

pub fn cluster_mass(w: &DMatrix<f64>) -> Normalizer {
    let cdiag = DVector::from_iterator(w.ncols(), w.column_iter().map(|col| col.sum()));
    let gram = w.tr_mul(w);
    Normalizer { cdiag, gram }
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidParameter(format!("s must lie in [0, 1], got {s}")));
    }
    Ok(())
}

/// Spectral data shared by the objective and gradient at one `W`.
struct Factor {
    s: f64,
    cdiag: DVector<f64>,
    gram: DMatrix<f64>,
    /// `γ_s^{-1}` (or its regularized counterpart).
    inv_gamma: DMatrix<f64>,
    /// Eigen-data of `M` for `s ∈ (0, 1)`.
    spectrum: Option<Spectrum>,
}

struct Spectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    kept: Vec<bool>,
    lmax: f64,
}

impl Spectrum {
    fn f(&self, s: f64, i: usize) -> f64 {
        if self.kept[i] {
            self.values[i].max(EIGEN_FLOOR).powf(-s)
        } else {
            0.0
        }
    }

    fn df(&self, s: f64, lambda: f64) -> f64 {
        let l = lambda.max(EIGEN_FLOOR);
        -s * l.powf(-s - 1.0)
    }

    /// Divided differences of `λ ↦ λ^{-s}` on the spectrum.
    fn divided_differences(&self, s: f64) -> DMatrix<f64> {
        let c = self.values.len();
        DMatrix::from_fn(c, c, |i, j| {
            if !(self.kept[i] && self.kept[j]) {
                return 0.0;
            }
            let (li, lj) = (self.values[i], self.values[j]);
            if (li - lj).abs() < DEGENERATE_GAP * self.lmax {
                self.df(s, 0.5 * (li + lj))
            } else {
                (self.f(s, i) - self.f(s, j)) / (li.max(EIGEN_FLOOR) - lj.max(EIGEN_FLOOR))
            }
        })
    }
}

impl Factor {
    fn new(w: &DMatrix<f64>, s: f64, policy: InversePolicy) -> Result<Self> {
        Self::build(w, s, policy, false)
    }

    fn build(w: &DMatrix<f64>, s: f64, policy: InversePolicy, spectral: bool) -> Result<Self> {
        check_s(s)?;
        if w.ncols() < 1 || w.nrows() < 1 {
            return Err(Error::InvalidDimension("empty assignment matrix".into()));
        }
        let Normalizer { cdiag, gram } = cluster_mass(w);
        if cdiag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(
                "assignment matrix has an empty column (zero cluster mass)".into(),
            ));
        }
        let c = w.ncols();
        if s == 0.0 && !spectral {
            let inv_gamma = DMatrix::from_diagonal(&cdiag.map(|v| 1.0 / v));
            return Ok(Self { s, cdiag, gram, inv_gamma, spectrum: None });
        }
        if policy == InversePolicy::Exact && s > 0.0 {
            let cond = linalg::sym_condition(&gram)?;
            if !(cond <= COND_LIMIT) {
                return Err(Error::RankDeficient { condition: cond });
            }
        }
        if s == 1.0 && !spectral {
            let inv_gamma = match policy {
                InversePolicy::Exact => {
                    let eig = linalg::sym_eigen(&gram)?;
                    linalg::spectral_map(&eig, |l| 1.0 / l)
                }
                InversePolicy::Pseudo => linalg::sym_pinv(&gram, PINV_TOL)?,
            };
            return Ok(Self { s, cdiag, gram, inv_gamma, spectrum: None });
        }
        let d = cdiag.map(|v| v.powf(-0.5));
        let m = scale_both(&gram, &d);
        let eig = linalg::sym_eigen(&m)?;
        let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let lmax = values.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        let kept = values
            .iter()
            .map(|&l| match policy {
                InversePolicy::Exact => true,
                InversePolicy::Pseudo => l > PINV_TOL * lmax,
            })
            .collect();
        let spectrum = Spectrum { values, vectors: eig.eigenvectors, kept, lmax };
        let mut scaled = spectrum.vectors.clone();
        for j in 0..c {
            let fj = spectrum.f(s, j);
            scaled.column_mut(j).scale_mut(fj);
        }
        let p = scaled * spectrum.vectors.transpose();
        let inv_gamma = scale_both(&p, &d);
        Ok(Self { s, cdiag, gram, inv_gamma, spectrum: Some(spectrum) })
    }

    fn objective_from_kw(&self, w: &DMatrix<f64>, kw: &DMatrix<f64>) -> f64 {
        let q = w.tr_mul(kw);
        linalg::trace_of_product(&self.inv_gamma, &q)
    }

    fn gradient_from_kw(&self, w: &DMatrix<f64>, kw: &DMatrix<f64>) -> DMatrix<f64> {
        let c = w.ncols();
        let q = sym(&w.tr_mul(kw));
        if self.spectrum.is_none() && self.s == 0.0 {
            // 2 K W C^{-1} − 1_n diag(C^{-1} Q C^{-1})^T
            let mut g = kw * (2.0 * &self.inv_gamma);
            for j in 0..c {
                let shift = q[(j, j)] / (self.cdiag[j] * self.cdiag[j]);
                g.column_mut(j).add_scalar_mut(-shift);
            }
            return g;
        }
        if self.spectrum.is_none() {
            // 2 (I − A_1) K W G^{-1} = 2 (K W − W G^{-1} Q) G^{-1}
            let inner = kw - w * (&self.inv_gamma * &q);
            return inner * (2.0 * &self.inv_gamma);
        }
        self.gradient_spectral(w, kw)
    }

    fn gradient_spectral(&self, w: &DMatrix<f64>, kw: &DMatrix<f64>) -> DMatrix<f64> {
        let c = w.ncols();
        let q = sym(&w.tr_mul(kw));
        let spec = self.spectrum.as_ref().expect("spectral factor");
        let d = self.cdiag.map(|v| v.powf(-0.5));
        let u = &spec.vectors;
        let nmat = scale_both(&q, &d);
        let rotated = u.transpose() * &nmat * u;
        let gamma = spec.divided_differences(self.s);
        let z = u * rotated.component_mul(&gamma) * u.transpose();
        let y = scale_both(&z, &d);
        let p_mat = {
            let mut scaled = u.clone();
            for j in 0..c {
                let fj = spec.f(self.s, j);
                scaled.column_mut(j).scale_mut(fj);
            }
            scaled * u.transpose()
        };
        let gdz = &self.gram * scale_rows(&z, &d);
        let qdp = &q * scale_rows(&p_mat, &d);
        let mut g = kw * (2.0 * &self.inv_gamma) + w * (2.0 * y);
        for j in 0..c {
            let cj = self.cdiag[j];
            let gc = -(gdz[(j, j)] + qdp[(j, j)]) / (cj * cj.sqrt());
            g.column_mut(j).add_scalar_mut(gc);
        }
        g
    }
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `Diag(d) A Diag(d)`.
fn scale_both(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| d[i] * a[(i, j)] * d[j])
}

/// `Diag(d) A`.
fn scale_rows(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| d[i] * a[(i, j)])
}

/// `γ_s(W) = C^{1/2} (C^{-1/2} W^T W C^{-1/2})^s C^{1/2}`.
pub fn geodesic_normalizer(w: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    check_s(s)?;
    let Normalizer { cdiag, gram } = cluster_mass(w);
    if cdiag.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("empty column in assignment matrix".into()));
    }
    if s == 0.0 {
        return Ok(DMatrix::from_diagonal(&cdiag));
    }
    let cond = linalg::sym_condition(&gram)?;
    if !(cond <= COND_LIMIT) {
        return Err(Error::RankDeficient { condition: cond });
    }
    if s == 1.0 {
        return Ok(gram);
    }
    let d = cdiag.map(|v| v.powf(-0.5));
    let m = scale_both(&gram, &d);
    let eig = linalg::sym_eigen(&m)?;
    let ms = linalg::spectral_map(&eig, |l| l.max(EIGEN_FLOOR).powf(s));
    let half = cdiag.map(|v| v.sqrt());
    let out = scale_both(&ms, &half);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite geodesic normalizer".into()));
    }
    Ok(sym(&out))
}

/// `γ_s(W)^{-1}` under the given policy.
pub fn inverse_normalizer(w: &DMatrix<f64>, s: f64, policy: InversePolicy) -> Result<DMatrix<f64>> {
    Ok(Factor::new(w, s, policy)?.inv_gamma)
}

/// Dense `A_s(W) = W γ_s(W)^{-1} W^T` (for `n <= DENSE_LIMIT`).
pub fn self_assignment(w: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    self_assignment_with(w, s, InversePolicy::Exact)
}

pub fn self_assignment_with(w: &DMatrix<f64>, s: f64, policy: InversePolicy) -> Result<DMatrix<f64>> {
    if w.nrows() > DENSE_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "dense self-assignment limited to n <= {DENSE_LIMIT}; use apply_self_assignment"
        )));
    }
    let f = Factor::new(w, s, policy)?;
    Ok(sym(&(w * &f.inv_gamma * w.transpose())))
}

/// Operator form `A_s(W) X = W (γ_s^{-1} (W^T X))`.
pub fn apply_self_assignment(
    w: &DMatrix<f64>,
    s: f64,
    policy: InversePolicy,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if x.nrows() != w.nrows() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", w.nrows()),
            got: format!("{} rows", x.nrows()),
        });
    }
    let f = Factor::new(w, s, policy)?;
    Ok(w * (&f.inv_gamma * w.tr_mul(x)))
}

/// Cluster-confusion matrix `B(W) = C(W)^{-1} W^T W`.
pub fn cluster_confusion(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let Normalizer { cdiag, gram } = cluster_mass(w);
    if cdiag.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("empty column in assignment matrix".into()));
    }
    Ok(DMatrix::from_fn(gram.nrows(), gram.ncols(), |i, j| gram[(i, j)] / cdiag[i]))
}

/// `tr B(W)`, a lower bound on `rank(W)`.
pub fn confusion_trace(w: &DMatrix<f64>) -> Result<f64> {
    Ok(cluster_confusion(w)?.trace())
}

/// `E_s(W) = tr(K A_s(W))`, evaluated as `tr(γ_s^{-1} W^T (K W))`.
pub fn objective(w: &DMatrix<f64>, k: &AffinityOperator, s: f64) -> Result<f64> {
    objective_with(w, k, s, InversePolicy::Exact)
}

pub fn objective_with(
    w: &DMatrix<f64>,
    k: &AffinityOperator,
    s: f64,
    policy: InversePolicy,
) -> Result<f64> {
    let kw = k.apply(w)?;
    Ok(Factor::new(w, s, policy)?.objective_from_kw(w, &kw))
}

/// Euclidean gradient `∂E_s(W)` (n × c).
pub fn grad_objective(w: &DMatrix<f64>, k: &AffinityOperator, s: f64) -> Result<DMatrix<f64>> {
    let kw = k.apply(w)?;
    grad_objective_from_kw(w, &kw, s, InversePolicy::Exact)
}

/// Gradient from a precomputed product `K W`.
pub fn grad_objective_from_kw(
    w: &DMatrix<f64>,
    kw: &DMatrix<f64>,
    s: f64,
    policy: InversePolicy,
) -> Result<DMatrix<f64>> {
    if kw.shape() != w.shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", w.shape()),
            got: format!("{:?}", kw.shape()),
        });
    }
    Ok(Factor::new(w, s, policy)?.gradient_from_kw(w, kw))
}

/// Objective and gradient sharing one factorization.
pub fn objective_and_gradient(
    w: &DMatrix<f64>,
    kw: &DMatrix<f64>,
    s: f64,
    policy: InversePolicy,
) -> Result<(f64, DMatrix<f64>)> {
    let f = Factor::new(w, s, policy)?;
    Ok((f.objective_from_kw(w, kw), f.gradient_from_kw(w, kw)))
}

/// The eigendecomposition gradient evaluated at any `s`, endpoints
/// included. Only used to cross-check the closed forms.
#[doc(hidden)]
pub fn grad_objective_spectral(w: &DMatrix<f64>, kw: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
    Ok(Factor::build(w, s, InversePolicy::Exact, true)?.gradient_spectral(w, kw))
}

/// `‖(I − Y Y^T) K Y‖_F` with `Y = W (W^T W)^{-1/2}`; zero exactly at
/// stationary points of `E_1`.
pub fn stiefel_stationarity_residual(w: &DMatrix<f64>, k: &AffinityOperator) -> Result<f64> {
    let y = stiefel_factor(w)?;
    let ky = k.apply(&y)?;
    let proj = &ky - &y * y.tr_mul(&ky);
    Ok(proj.norm())
}

/// `Y(W) = W (W^T W)^{-1/2}`, a point on the compact Stiefel manifold.
pub fn stiefel_factor(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = w.tr_mul(w);
    let cond = linalg::sym_condition(&gram)?;
    if !(cond <= COND_LIMIT) {
        return Err(Error::RankDeficient { condition: cond });
    }
    let eig = linalg::sym_eigen(&gram)?;
    Ok(w * linalg::spectral_map(&eig, |l| l.powf(-0.5)))
}

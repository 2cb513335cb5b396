//! Geometry of the open probability simplex and of the assignment manifold
//! (row-wise product of simplices).
//!
//! The maps follow the e-connection of information geometry:
//!
//! ```text
//! R_p(x)        = p ⊙ x − ⟨p, x⟩ p                  (replicator map)
//! Exp_p(v)      = p ⊙ e^{v/p} / ⟨p, e^{v/p}⟩          v ∈ T_0
//! Exp_p^{-1}(q) = R_p log(q / p)
//! exp_p(x)      = Exp_p(R_p x) = p ⊙ e^x / ⟨p, e^x⟩    ("lift")
//! ```
//!
//! All exponentials are evaluated after subtracting the maximum exponent,
//! which leaves the normalized result unchanged.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tolerance on `|Σ p − 1|` accepted for simplex points.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// Lower bound applied to assignment entries after every integration step.
pub const EPS_RENORM: f64 = 1e-10;

/// A point in the relative interior of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidDimension(format!(
                "simplex points need at least 2 entries, got {}",
                p.len()
            )));
        }
        if p.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(
                "simplex point entries must be finite and positive".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "simplex point sums to {sum}, expected 1"
            )));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A zero-sum vector, i.e. an element of the tangent space `T_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    /// Wraps `v`, checking the zero-sum condition.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let sum: f64 = v.iter().sum();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sum.abs() > 1e-10 * norm.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "tangent vector has component sum {sum}"
            )));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Uniform distribution on `c` labels.
pub fn barycenter(c: usize) -> Result<SimplexPoint> {
    if c < 2 {
        return Err(Error::InvalidDimension(format!(
            "label count must be at least 2, got {c}"
        )));
    }
    Ok(SimplexPoint(vec![1.0 / c as f64; c]))
}

/// Orthogonal projection onto `T_0`: removes the mean.
pub fn project_tangent(x: &[f64]) -> TangentVector {
    TangentVector(project_tangent_raw(x))
}

pub(crate) fn project_tangent_raw(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Replicator map `R_p x = p ⊙ x − ⟨p, x⟩ p`.
pub fn replicator(p: &SimplexPoint, x: &[f64]) -> TangentVector {
    TangentVector(replicator_raw(&p.0, x))
}

pub(crate) fn replicator_raw(p: &[f64], x: &[f64]) -> Vec<f64> {
    let mean: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
    p.iter().zip(x).map(|(pj, xj)| pj * (xj - mean)).collect()
}

/// e-connection exponential map `Exp_p(v)`.
pub fn exp_e(p: &SimplexPoint, v: &TangentVector) -> SimplexPoint {
    let ratio: Vec<f64> = v.0.iter().zip(&p.0).map(|(vj, pj)| vj / pj).collect();
    let mut out = vec![0.0; p.dim()];
    lift_into(&p.0, &ratio, &mut out);
    SimplexPoint(out)
}

/// Inverse of [`exp_e`]: `Exp_p^{-1}(q) = R_p log(q / p)`.
pub fn exp_e_inv(p: &SimplexPoint, q: &SimplexPoint) -> TangentVector {
    let log_ratio: Vec<f64> = q.0.iter().zip(&p.0).map(|(qj, pj)| (qj / pj).ln()).collect();
    TangentVector(replicator_raw(&p.0, &log_ratio))
}

/// `exp_p(x) = Exp_p(R_p x)`, independent of the constant component of `x`.
pub fn lift(p: &SimplexPoint, x: &[f64]) -> SimplexPoint {
    let mut out = vec![0.0; p.dim()];
    lift_into(&p.0, x, &mut out);
    SimplexPoint(out)
}

/// Writes `p ⊙ e^{x} / ⟨p, e^{x}⟩` into `out`, shifting `x` by its maximum.
pub(crate) fn lift_into(p: &[f64], x: &[f64], out: &mut [f64]) {
    let shift = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((o, pj), xj) in out.iter_mut().zip(p).zip(x) {
        *o = pj * (xj - shift).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Raises every entry of `row` to at least `floor`, removing the added mass
/// from the largest entry so that the row keeps summing to one.
pub(crate) fn floor_row(row: &mut [f64], floor: f64) {
    let mut added = 0.0;
    for v in row.iter_mut() {
        if *v < floor {
            added += floor - *v;
            *v = floor;
        }
    }
    let mut imax = 0;
    for j in 1..row.len() {
        if row[j] > row[imax] {
            imax = j;
        }
    }
    row[imax] -= added;
    let sum: f64 = row.iter().sum();
    // absorb roundoff into the dominant entry
    row[imax] += 1.0 - sum;
}

/// Row-stochastic `n × c` matrix whose rows lie in the open simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(DMatrix<f64>);

impl AssignmentMatrix {
    /// Validates `w` row by row.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() < 2 {
            return Err(Error::InvalidDimension(format!(
                "assignment matrices need at least 2 columns, got {}",
                w.ncols()
            )));
        }
        if w.nrows() == 0 {
            return Err(Error::InvalidDimension("assignment matrix has no rows".into()));
        }
        for (i, row) in w.row_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row.iter() {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "row {i} has a non-positive or non-finite entry"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
                return Err(Error::InvalidInput(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self(w))
    }

    pub(crate) fn from_matrix_unchecked(w: DMatrix<f64>) -> Self {
        Self(w)
    }

    /// Every row equal to the barycenter.
    pub fn barycenter(n: usize, c: usize) -> Result<Self> {
        let b = barycenter(c)?;
        if n == 0 {
            return Err(Error::InvalidDimension("n must be positive".into()));
        }
        Ok(Self(DMatrix::from_fn(n, c, |_, j| b.0[j])))
    }

    /// `exp_{W}(X)` applied row by row.
    pub fn lift_rows(&self, x: &DMatrix<f64>) -> Result<Self> {
        if x.shape() != self.0.shape() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", self.0.shape()),
                got: format!("{:?}", x.shape()),
            });
        }
        let (n, c) = self.0.shape();
        let mut out = DMatrix::zeros(n, c);
        let mut p = vec![0.0; c];
        let mut xi = vec![0.0; c];
        let mut o = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                p[j] = self.0[(i, j)];
                xi[j] = x[(i, j)];
            }
            lift_into(&p, &xi, &mut o);
            for j in 0..c {
                out[(i, j)] = o[j];
            }
        }
        Ok(Self(out))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> SimplexPoint {
        SimplexPoint(self.0.row(i).iter().copied().collect())
    }
}

//! Data affinity matrices: exact Gaussian kernels, precomputed weights and
//! Nyström column sketches behind one product interface.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue cut used when pseudo-inverting the sampled block.
pub const NYSTROM_PINV_TOL: f64 = 1e-10;

/// How distances between feature rows are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Euclidean,
    Precomputed,
    Patch,
}

/// `n × d` feature matrix, one row per vertex.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    data: DMatrix<f64>,
    metric: DistanceKind,
}

impl FeatureSet {
    pub fn new(data: DMatrix<f64>, metric: DistanceKind) -> Result<Self> {
        if data.nrows() < 2 {
            return Err(Error::InvalidDimension(format!(
                "need at least 2 feature vectors, got {}",
                data.nrows()
            )));
        }
        if data.ncols() < 1 {
            return Err(Error::InvalidDimension("features need at least one column".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self { data, metric })
    }

    pub fn euclidean(data: DMatrix<f64>) -> Result<Self> {
        Self::new(data, DistanceKind::Euclidean)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn metric(&self) -> DistanceKind {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn sq_distance(&self, i: usize, k: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.data.ncols() {
            let d = self.data[(i, j)] - self.data[(k, j)];
            acc += d * d;
        }
        acc
    }

    pub fn distance(&self, i: usize, k: usize) -> f64 {
        self.sq_distance(i, k).sqrt()
    }
}

/// Low-rank factors `K ≈ C A^† C^T` from `ℓ` sampled columns.
#[derive(Debug, Clone)]
pub struct NystromSketch {
    cfac: DMatrix<f64>,
    apinv: DMatrix<f64>,
    indices: Vec<usize>,
}

impl NystromSketch {
    pub fn cfac(&self) -> &DMatrix<f64> {
        &self.cfac
    }

    pub fn apinv(&self) -> &DMatrix<f64> {
        &self.apinv
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn rank_bound(&self) -> usize {
        self.indices.len()
    }
}

/// Symmetric affinity matrix, stored densely or as a Nyström sketch.
#[derive(Debug, Clone)]
pub enum AffinityOperator {
    Exact(DMatrix<f64>),
    Sketched(NystromSketch),
}

impl AffinityOperator {
    /// Wraps a precomputed affinity, replacing it by `(K + K^T) / 2`.
    pub fn from_precomputed(k: DMatrix<f64>) -> Result<Self> {
        if !k.is_square() {
            return Err(Error::DimensionMismatch {
                expected: "square matrix".into(),
                got: format!("{}x{}", k.nrows(), k.ncols()),
            });
        }
        if k.nrows() < 2 {
            return Err(Error::InvalidDimension("affinity needs at least 2 vertices".into()));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite affinity value".into()));
        }
        let kt = k.transpose();
        let asym = linalg::max_abs_diff(&k, &kt);
        if asym > 1e-8 {
            log::warn!("affinity matrix asymmetric by {asym:.3e}; symmetrizing");
        }
        Ok(Self::Exact((k + kt) * 0.5))
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Exact(k) => k.nrows(),
            Self::Sketched(s) => s.cfac.nrows(),
        }
    }

    pub fn is_sketched(&self) -> bool {
        matches!(self, Self::Sketched(_))
    }

    /// `K X`, without forming an `n × n` matrix for sketches.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows", self.n()),
                got: format!("{} rows", x.nrows()),
            });
        }
        Ok(match self {
            Self::Exact(k) => k * x,
            Self::Sketched(s) => {
                let inner = s.cfac.tr_mul(x);
                &s.cfac * (&s.apinv * inner)
            }
        })
    }

    /// Dense `n × n` matrix (the reconstruction `C A^† C^T` for sketches).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Exact(k) => k.clone(),
            Self::Sketched(s) => &s.cfac * &s.apinv * s.cfac.transpose(),
        }
    }

    /// Diagonal entries `K_ii`.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Self::Exact(k) => (0..k.nrows()).map(|i| k[(i, i)]).collect(),
            Self::Sketched(s) => {
                let ca = &s.cfac * &s.apinv;
                (0..s.cfac.nrows())
                    .map(|i| ca.row(i).dot(&s.cfac.row(i)))
                    .collect()
            }
        }
    }
}

/// Gaussian affinity `exp(-d(i,k)^2 / sigma^2)` built from an arbitrary
/// symmetric distance callback.
pub fn gaussian_from_distances<D>(n: usize, sigma: f64, dist: D) -> Result<AffinityOperator>
where
    D: Fn(usize, usize) -> f64 + Sync,
{
    check_sigma(sigma)?;
    if n < 2 {
        return Err(Error::InvalidDimension("affinity needs at least 2 vertices".into()));
    }
    let s2 = sigma * sigma;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|k| {
                    if k < i {
                        0.0
                    } else if k == i {
                        1.0
                    } else {
                        let d = dist(i, k);
                        (-d * d / s2).exp()
                    }
                })
                .collect()
        })
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for j in i..n {
            k[(i, j)] = row[j];
            k[(j, i)] = row[j];
        }
    }
    Ok(AffinityOperator::Exact(k))
}

/// Exact Gaussian kernel on Euclidean features.
pub fn gaussian_kernel(features: &FeatureSet, sigma: f64) -> Result<AffinityOperator> {
    gaussian_from_distances(features.len(), sigma, |i, k| features.distance(i, k))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "kernel width must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// Draws `ell` distinct column indices uniformly (ChaCha8, seeded); the
/// result is sorted.
pub fn sample_columns(n: usize, ell: usize, seed: u64) -> Result<Vec<usize>> {
    if ell == 0 || ell > n {
        return Err(Error::InvalidParameter(format!(
            "sketch size must lie in [1, {n}], got {ell}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, ell).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Nyström sketch of an exact operator from uniformly sampled columns.
pub fn nystrom_sketch(op: &AffinityOperator, ell: usize, seed: u64) -> Result<AffinityOperator> {
    let k = match op {
        AffinityOperator::Exact(k) => k,
        AffinityOperator::Sketched(_) => {
            return Err(Error::InvalidInput("cannot re-sketch a sketched operator".into()))
        }
    };
    let idx = sample_columns(k.nrows(), ell, seed)?;
    nystrom_from_indices(k.nrows(), &idx, |j| k.column(j).iter().copied().collect())
}

/// Nyström sketch where column `j` of the kernel is produced on demand.
pub fn nystrom_from_kernel<F>(n: usize, ell: usize, seed: u64, column: F) -> Result<AffinityOperator>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    let idx = sample_columns(n, ell, seed)?;
    nystrom_from_indices(n, &idx, column)
}

/// Nyström sketch for an explicit set of sampled columns.
pub fn nystrom_from_indices<F>(n: usize, indices: &[usize], column: F) -> Result<AffinityOperator>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    if indices.is_empty() || indices.len() > n {
        return Err(Error::InvalidParameter(format!(
            "sketch size must lie in [1, {n}], got {}",
            indices.len()
        )));
    }
    if indices.iter().any(|&j| j >= n) {
        return Err(Error::InvalidParameter("sample index out of range".into()));
    }
    let ell = indices.len();
    let cols: Vec<Vec<f64>> = indices.par_iter().map(|&j| column(j)).collect();
    let mut cfac = DMatrix::zeros(n, ell);
    for (jj, col) in cols.iter().enumerate() {
        if col.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("kernel column of length {n}"),
                got: format!("{}", col.len()),
            });
        }
        for i in 0..n {
            cfac[(i, jj)] = col[i];
        }
    }
    let block = DMatrix::from_fn(ell, ell, |a, b| cfac[(indices[a], b)]);
    let apinv = linalg::sym_pinv(&block, NYSTROM_PINV_TOL)?;
    Ok(AffinityOperator::Sketched(NystromSketch {
        cfac,
        apinv,
        indices: indices.to_vec(),
    }))
}

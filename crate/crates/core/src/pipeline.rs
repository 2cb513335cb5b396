//! End-to-end runs: affinity, seeding, flow, rounding and prototypes.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::affinity::{self, AffinityOperator, FeatureSet};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowOutcome, NeighborhoodSystem};
use crate::patchlab::{self, LazyPatchDistances, PatchDistances, PatchGrid, PatchPrototype, Reconstruction};
use crate::prototypes::{self, PrototypeSet};
use crate::seeding::{self, SeedSet};
use crate::selfassign::{self, InversePolicy};

/// `n` above which the affinity is sketched unless told otherwise.
pub const SKETCH_THRESHOLD: usize = 4096;

/// Default number of sampled columns for large inputs.
pub const DEFAULT_SKETCH_COLS: usize = 100;

/// Kernel width matching unit-range features.
pub const DEFAULT_SIGMA: f64 = 0.316_227_766_016_837_94;

/// How to build the affinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchMode {
    /// Dense up to [`SKETCH_THRESHOLD`], otherwise [`DEFAULT_SKETCH_COLS`] columns.
    Auto,
    Exact,
    Columns(usize),
}

impl SketchMode {
    pub fn resolve(self, n: usize) -> Option<usize> {
        match self {
            Self::Auto if n > SKETCH_THRESHOLD => Some(DEFAULT_SKETCH_COLS.min(n)),
            Self::Auto | Self::Exact => None,
            Self::Columns(l) => Some(l.min(n)),
        }
    }
}

/// Options shared by the pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelOptions {
    /// Upper bound on the number of labels.
    pub c: usize,
    pub sigma: f64,
    pub sketch: SketchMode,
    pub seed: u64,
    pub flow: FlowConfig,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            c: 8,
            sigma: DEFAULT_SIGMA,
            sketch: SketchMode::Auto,
            seed: 0,
            flow: FlowConfig::default(),
        }
    }
}

impl LabelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::InvalidParameter(format!("need c >= 2, got {}", self.c)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let SketchMode::Columns(0) = self.sketch {
            return Err(Error::InvalidParameter("sketch needs at least one column".into()));
        }
        self.flow.validate()
    }
}

/// Output of a labeling run.
#[derive(Debug, Clone)]
pub struct LabelRun {
    pub outcome: FlowOutcome,
    pub seeds: SeedSet,
    /// `E_s` at the final iterate.
    pub objective: f64,
    /// `tr B(W)` at the final iterate.
    pub trace_b: f64,
    /// Number of sampled columns, when sketched.
    pub sketch_cols: Option<usize>,
}

/// Builds the (possibly sketched) Gaussian affinity of Euclidean features.
pub fn feature_affinity(features: &FeatureSet, sigma: f64, sketch: SketchMode, seed: u64) -> Result<AffinityOperator> {
    let n = features.len();
    match sketch.resolve(n) {
        None => affinity::gaussian_kernel(features, sigma),
        Some(ell) => {
            let s2 = sigma * sigma;
            affinity::nystrom_from_kernel(n, ell, seed, |j| {
                (0..n).map(|i| (-features.sq_distance(i, j) / s2).exp()).collect()
            })
        }
    }
}

/// Seeds with `k = c` greedy centers, runs the SAF and summarizes the result.
/// `dist_to(c)[i]` is the distance from vertex `i` to vertex `c`.
pub fn run_with_affinity<D>(
    k: &AffinityOperator,
    nbhd: &NeighborhoodSystem,
    opts: &LabelOptions,
    dist_to: D,
) -> Result<LabelRun>
where
    D: Fn(usize) -> Vec<f64>,
{
    opts.validate()?;
    let n = k.n();
    if opts.c > n {
        return Err(Error::InvalidParameter(format!("c = {} exceeds n = {n}", opts.c)));
    }
    let (seeds, d0) = seeding::greedy_k_center_columns(n, opts.c, opts.seed, dist_to)?;
    let outcome = flow::run_saf(k, nbhd, &opts.flow, &d0)?;
    let policy = if outcome.pseudo_inverse { InversePolicy::Pseudo } else { InversePolicy::Exact };
    let w = outcome.w.matrix();
    let objective = selfassign::objective_with(w, k, opts.flow.s, policy)
        .or_else(|_| selfassign::objective_with(w, k, opts.flow.s, InversePolicy::Pseudo))?;
    let trace_b = selfassign::confusion_trace(w)?;
    let sketch_cols = match k {
        AffinityOperator::Sketched(s) => Some(s.rank_bound()),
        AffinityOperator::Exact(_) => None,
    };
    Ok(LabelRun { outcome, seeds, objective, trace_b, sketch_cols })
}

/// Labels Euclidean feature vectors: Gaussian affinity, k-center seeding, SAF.
pub fn label_features(features: &FeatureSet, nbhd: &NeighborhoodSystem, opts: &LabelOptions) -> Result<LabelRun> {
    opts.validate()?;
    let k = feature_affinity(features, opts.sigma, opts.sketch, opts.seed)?;
    run_with_affinity(&k, nbhd, opts, euclidean_column(features))
}

fn euclidean_column(features: &FeatureSet) -> impl Fn(usize) -> Vec<f64> + '_ {
    |c| (0..features.len()).into_par_iter().map(|i| features.distance(i, c)).collect()
}

/// Labels plus the prototypes of the rounded clusters.
pub fn label_features_with_prototypes(
    features: &FeatureSet,
    nbhd: &NeighborhoodSystem,
    opts: &LabelOptions,
) -> Result<(LabelRun, PrototypeSet)> {
    let run = label_features(features, nbhd, opts)?;
    let protos = prototypes::recover_prototypes(&run.outcome.labels.indicator(), features)?;
    Ok((run, protos))
}

/// Spectral embedding of a graph: the `c` algebraically largest eigenvectors
/// of the weighted adjacency, one row per vertex.
///
/// Power iteration with deflation on `K_E + τ I`, where `τ` is the largest
/// weighted degree, so that the dominant eigenvalues are the largest ones.
pub fn spectral_features(n: usize, edges: &[(usize, usize, f64)], c: usize, seed: u64) -> Result<DMatrix<f64>> {
    use rand::{Rng, SeedableRng};
    if c == 0 || c > n {
        return Err(Error::InvalidParameter(format!("need 1 <= c <= n = {n}, got {c}")));
    }
    let mut adj = vec![Vec::<(usize, f64)>::new(); n];
    let mut degree = vec![0.0; n];
    for &(i, k, w) in edges {
        if i >= n || k >= n {
            return Err(Error::InvalidInput(format!("edge ({i}, {k}) out of range for n = {n}")));
        }
        adj[i].push((k, w));
        degree[i] += w;
        if i != k {
            adj[k].push((i, w));
            degree[k] += w;
        }
    }
    let tau = degree.iter().copied().fold(0.0, f64::max);
    let matvec = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| tau * x[i] + adj[i].iter().map(|&(k, w)| w * x[k]).sum::<f64>())
            .collect()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthonormalize(&mut v, &basis);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut next = matvec(&v);
            orthonormalize(&mut next, &basis);
            let new_lambda: f64 = matvec(&next).iter().zip(&next).map(|(a, b)| a * b).sum();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if (new_lambda - lambda).abs() <= 1e-12 * new_lambda.abs().max(1.0) && delta < 1e-9 {
                break;
            }
            lambda = new_lambda;
        }
        basis.push(v);
    }
    Ok(DMatrix::from_fn(n, c, |i, j| basis[j][i]))
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes of Gram–Schmidt for stability
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Graph partitioning: affinity `K_E`, graph weights, spectral seeding.
pub fn label_graph(n: usize, edges: &[(usize, usize, f64)], opts: &LabelOptions) -> Result<LabelRun> {
    opts.validate()?;
    let mut k = DMatrix::zeros(n, n);
    for &(i, j, w) in edges {
        if i >= n || j >= n {
            return Err(Error::InvalidInput(format!("edge ({i}, {j}) out of range for n = {n}")));
        }
        k[(i, j)] += w;
        if i != j {
            k[(j, i)] += w;
        }
    }
    let k = AffinityOperator::from_precomputed(k)?;
    let nbhd = NeighborhoodSystem::graph_weights(n, edges)?;
    let spectral = spectral_features(n, edges, opts.c, opts.seed)?;
    let feats = FeatureSet::euclidean(spectral)?;
    run_with_affinity(&k, &nbhd, opts, euclidean_column(&feats))
}

/// Options of the patch pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchOptions {
    pub label: LabelOptions,
    /// Side of the averaging window on the interior grid.
    pub nbhd_side: usize,
    pub mm_rounds: usize,
}

/// Patch distances sum per-pixel norms, so the kernel width scales with the
/// window: `0.1` per pixel.
pub fn default_patch_sigma(side: usize) -> f64 {
    0.1 * (side * side) as f64
}

impl PatchOptions {
    /// Defaults with the kernel width matched to `side × side` patches.
    pub fn for_side(side: usize) -> Self {
        let label = LabelOptions { sigma: default_patch_sigma(side), ..LabelOptions::default() };
        Self { label, nbhd_side: 3, mm_rounds: patchlab::DEFAULT_MM_ROUNDS }
    }
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self::for_side(7)
    }
}

/// Output of the patch pipeline. Labels refer to interior centers.
#[derive(Debug, Clone)]
pub struct PatchRun {
    pub run: LabelRun,
    /// One per effective label, in label order.
    pub prototypes: Vec<PatchPrototype>,
    pub reconstruction: Reconstruction,
}

/// Invariant patch affinity, SAF over the interior grid, prototype learning
/// and reconstruction.
pub fn label_patches(grid: &PatchGrid, opts: &PatchOptions) -> Result<PatchRun> {
    opts.label.validate()?;
    let n = grid.interior_len();
    let (ih, iw) = grid.interior_shape();
    let nbhd = NeighborhoodSystem::grid_uniform(ih, iw, opts.nbhd_side)?;
    let sigma = opts.label.sigma;
    let gauss = move |d: f64| (-(d * d) / (sigma * sigma)).exp();
    let mut table = None;
    let run = match opts.label.sketch.resolve(n) {
        None => {
            let dist = PatchDistances::compute(grid);
            let k = dist.affinity(sigma)?;
            let run = run_with_affinity(&k, &nbhd, &opts.label, |c| (0..n).map(|i| dist.asym(i, c)).collect())?;
            table = Some(dist);
            run
        }
        Some(ell) => {
            let lazy = LazyPatchDistances::new(grid);
            let k = affinity::nystrom_from_kernel(n, ell, opts.label.seed, |c| {
                lazy.sym_column(c).into_iter().map(gauss).collect()
            })?;
            run_with_affinity(&k, &nbhd, &opts.label, |c| lazy.asym_to(c))?
        }
    };
    let labels = &run.outcome.labels;
    let prototypes =
        patchlab::learn_patch_prototypes_with(&labels.indicator(), grid, opts.mm_rounds, table.as_ref())?;
    let reconstruction = patchlab::assign_and_reconstruct(&prototypes, grid, &labels.labels)?;
    Ok(PatchRun { run, prototypes, reconstruction })
}

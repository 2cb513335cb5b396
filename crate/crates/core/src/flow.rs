//! Assignment flows on the product of simplices.
//!
//! One step of the self-assignment flow (SAF) is
//!
//! ```text
//! G = ∂E_s(W)                       Euclidean gradient of the objective
//! L_i = lift(W_i, G_i / ρ)           generalized likelihood
//! S_i = Exp_{W_i}(Σ_k w_ik Exp⁻¹_{W_i}(L_k))   geometric averaging
//! W_i ← Exp_{W_i}(h R_{W_i} S_i) = lift(W_i, h S_i)
//! ```
//!
//! followed by flooring the entries at `eps_renorm`. The supervised assignment
//! flow is the same loop with `L_i = lift(W_i, −d_i / ρ)` for fixed distances.
//!
//! State is kept row-major so that the per-vertex maps touch contiguous memory.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::affinity::AffinityOperator;
use crate::error::{Error, Result};
use crate::manifold::{floor_row, lift_into, AssignmentMatrix, SimplexPoint, EPS_RENORM};
use crate::selfassign::{self, InversePolicy};

/// Neighborhoods `N_i` (always containing `i`) with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSystem {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl NeighborhoodSystem {
    /// Builds from unnormalized positive weights; each row is rescaled to sum one.
    pub fn from_weighted_lists(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (i, row) in rows.into_iter().enumerate() {
            if !row.iter().any(|&(k, _)| k == i) {
                return Err(Error::InvalidInput(format!("vertex {i} missing from its own neighborhood")));
            }
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            for &(k, w) in &row {
                if k >= n {
                    return Err(Error::InvalidInput(format!("neighbor {k} out of range for n = {n}")));
                }
                if !(w > 0.0 && w.is_finite()) {
                    return Err(Error::InvalidInput(format!("non-positive weight {w} at ({i}, {k})")));
                }
            }
            for (k, w) in row {
                indices.push(k);
                weights.push(w / total);
            }
            offsets.push(indices.len());
        }
        Ok(Self { offsets, indices, weights })
    }

    /// `N_i = {i}` with unit weight; the flow then has no spatial coupling.
    pub fn singletons(n: usize) -> Self {
        Self {
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            weights: vec![1.0; n],
        }
    }

    /// Uniform weights over `{k : |k − i| <= radius}` on a path graph.
    pub fn path(n: usize, radius: usize) -> Self {
        let rows = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(n - 1);
                (lo..=hi).map(|k| (k, 1.0)).collect()
            })
            .collect();
        Self::from_weighted_lists(rows).expect("path neighborhoods are valid")
    }

    /// Uniform weights over a `side × side` window, cropped at the border.
    /// Pixels are indexed row-major, `i = r * width + col`.
    pub fn grid_uniform(height: usize, width: usize, side: usize) -> Result<Self> {
        check_window(height, width, side)?;
        let rows = (0..height * width)
            .map(|i| grid_window(height, width, side, i).map(|k| (k, 1.0)).collect())
            .collect();
        Self::from_weighted_lists(rows)
    }

    /// Non-local-means weights `exp(−‖P_i − P_k‖²_F / ρ_w)` over the window,
    /// with patches of side `patch_side` taken from `pixels` (`n × channels`,
    /// row-major pixel order) and replicated at the image border.
    pub fn grid_nlm(
        height: usize,
        width: usize,
        side: usize,
        pixels: &DMatrix<f64>,
        patch_side: usize,
        rho_w: f64,
    ) -> Result<Self> {
        check_window(height, width, side)?;
        if patch_side % 2 == 0 {
            return Err(Error::InvalidParameter(format!("patch side must be odd, got {patch_side}")));
        }
        if pixels.nrows() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels", height * width),
                got: format!("{}", pixels.nrows()),
            });
        }
        if !(rho_w > 0.0 && rho_w.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho_w must be positive, got {rho_w}")));
        }
        let half = (patch_side / 2) as isize;
        let ch = pixels.ncols();
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        let patch = |i: usize| -> Vec<f64> {
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            let mut out = Vec::with_capacity(patch_side * patch_side * ch);
            for dr in -half..=half {
                for dc in -half..=half {
                    let p = clamp(r + dr, height) * width + clamp(c + dc, width);
                    out.extend((0..ch).map(|q| pixels[(p, q)]));
                }
            }
            out
        };
        let patches: Vec<Vec<f64>> = (0..height * width).into_par_iter().map(patch).collect();
        let rows = (0..height * width)
            .into_par_iter()
            .map(|i| {
                grid_window(height, width, side, i)
                    .map(|k| {
                        let d2: f64 = patches[i]
                            .iter()
                            .zip(&patches[k])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        // keep strictly positive under underflow
                        (k, (-d2 / rho_w).exp().max(f64::MIN_POSITIVE))
                    })
                    .collect()
            })
            .collect();
        Self::from_weighted_lists(rows)
    }

    /// Graph weights `w̃ = K_E + Diag(K_E 1)` over `{i} ∪ neighbors(i)`.
    /// Edges are undirected, each pair listed once; repeated pairs accumulate.
    pub fn graph_weights(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
        for &(i, k, w) in edges {
            if i >= n || k >= n {
                return Err(Error::InvalidInput(format!("edge ({i}, {k}) out of range for n = {n}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("edge ({i}, {k}) has non-positive weight {w}")));
            }
            *adj[i].entry(k).or_insert(0.0) += w;
            if i != k {
                *adj[k].entry(i).or_insert(0.0) += w;
            }
        }
        let rows = adj
            .into_iter()
            .enumerate()
            .map(|(i, mut row)| {
                let degree: f64 = row.values().sum();
                // an isolated vertex keeps only itself
                *row.entry(i).or_insert(0.0) += if degree > 0.0 { degree } else { 1.0 };
                row.into_iter().collect()
            })
            .collect();
        Self::from_weighted_lists(rows)
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn max_size(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

fn check_window(height: usize, width: usize, side: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension("empty grid".into()));
    }
    if side == 0 || side % 2 == 0 {
        return Err(Error::InvalidParameter(format!("window side must be odd, got {side}")));
    }
    Ok(())
}

fn grid_window(height: usize, width: usize, side: usize, i: usize) -> impl Iterator<Item = usize> {
    let half = side / 2;
    let (r, c) = (i / width, i % width);
    let (r0, r1) = (r.saturating_sub(half), (r + half).min(height - 1));
    let (c0, c1) = (c.saturating_sub(half), (c + half).min(width - 1));
    (r0..=r1).flat_map(move |rr| (c0..=c1).map(move |cc| rr * width + cc))
}

/// Integration and termination parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub s: f64,
    pub rho: f64,
    pub h: f64,
    pub entropy_tol: f64,
    pub max_iters: usize,
    pub eps_init: f64,
    pub eps_renorm: f64,
    /// Condition number of `W^T W` that switches `s > 0` runs to the pseudo-inverse.
    pub pinv_condition: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            s: 0.0,
            rho: 0.1,
            h: 0.1,
            entropy_tol: 1e-3,
            max_iters: 5000,
            eps_init: 1e-2,
            eps_renorm: EPS_RENORM,
            pinv_condition: selfassign::COND_LIMIT,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::InvalidParameter(format!("s must lie in [0, 1], got {}", self.s)));
        }
        positive("rho", self.rho)?;
        positive("h", self.h)?;
        positive("entropy_tol", self.entropy_tol)?;
        positive("eps_init", self.eps_init)?;
        positive("eps_renorm", self.eps_renorm)?;
        if self.eps_init >= 1.0 {
            return Err(Error::InvalidParameter("eps_init must be small (< 1)".into()));
        }
        Ok(())
    }
}

/// Rounded labeling with empty clusters removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    /// Label per vertex in `0..effective`.
    pub labels: Vec<usize>,
    /// Number of nonempty clusters `ĉ`.
    pub effective: usize,
    /// Original column of each surviving label.
    pub label_index_map: Vec<usize>,
}

impl LabelField {
    /// Binary `n × ĉ` indicator matrix.
    pub fn indicator(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.labels.len(), self.effective, |i, j| {
            if self.labels[i] == j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Relabels clusters by order of first occurrence along the vertices.
    pub fn first_occurrence_order(&self) -> LabelField {
        let mut remap = vec![usize::MAX; self.effective];
        let mut next = 0;
        for &l in &self.labels {
            if remap[l] == usize::MAX {
                remap[l] = next;
                next += 1;
            }
        }
        let mut label_index_map = vec![0; self.effective];
        for (old, &new) in remap.iter().enumerate() {
            label_index_map[new] = self.label_index_map[old];
        }
        LabelField {
            labels: self.labels.iter().map(|&l| remap[l]).collect(),
            effective: self.effective,
            label_index_map,
        }
    }
}

/// Per-iteration record of the integration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub entropy: f64,
    /// `tr B(W)`, a lower bound on `rank(W)`.
    pub trace_b: f64,
    /// Relative cluster masses `C(W) / n`.
    pub masses: Vec<f64>,
    pub pseudo_inverse: bool,
}

impl IterationRecord {
    pub fn min_mass(&self) -> f64 {
        self.masses.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_mass(&self) -> f64 {
        self.masses.iter().copied().fold(0.0, f64::max)
    }
}

/// Result of integrating a flow.
#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub labels: LabelField,
    pub w: AssignmentMatrix,
    pub trace: Vec<IterationRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub final_entropy: f64,
    /// Whether the run switched to the pseudo-inverse of `W^T W`.
    pub pseudo_inverse: bool,
}

/// `lift(W_i, −d_i / ρ)`.
pub fn likelihood(w_i: &SimplexPoint, d_i: &[f64], rho: f64) -> SimplexPoint {
    let x: Vec<f64> = d_i.iter().map(|d| -d / rho).collect();
    crate::manifold::lift(w_i, &x)
}

/// Rows `lift(W_i, +G_i / ρ)`: ascent on the objective.
pub fn generalized_likelihood(w: &AssignmentMatrix, grad: &DMatrix<f64>, rho: f64) -> Result<AssignmentMatrix> {
    if grad.shape() != w.matrix().shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", w.matrix().shape()),
            got: format!("{:?}", grad.shape()),
        });
    }
    let c = w.ncols();
    let wr = RowMajor::from_matrix(w.matrix());
    let gr = RowMajor::from_matrix(grad);
    let mut out = RowMajor::zeros(w.nrows(), c);
    lift_rows(&wr, &gr, 1.0 / rho, &mut out);
    Ok(AssignmentMatrix::from_matrix_unchecked(out.to_matrix()))
}

/// Weighted geometric averaging of likelihood rows over neighborhoods.
pub fn similarity(w: &AssignmentMatrix, l: &AssignmentMatrix, nbhd: &NeighborhoodSystem) -> Result<AssignmentMatrix> {
    check_shapes(w, l, nbhd)?;
    let mut lr = RowMajor::from_matrix(l.matrix());
    lr.data.iter_mut().for_each(|v| *v = v.ln());
    let mut out = RowMajor::zeros(w.nrows(), w.ncols());
    similarity_log_rows(&lr, nbhd, &mut out);
    Ok(AssignmentMatrix::from_matrix_unchecked(out.to_matrix()))
}

/// `W_i ← lift(W_i, h S_i)`, then floor at `eps_renorm`.
pub fn euler_step(w: &AssignmentMatrix, s: &AssignmentMatrix, h: f64, eps_renorm: f64) -> Result<AssignmentMatrix> {
    if w.matrix().shape() != s.matrix().shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", w.matrix().shape()),
            got: format!("{:?}", s.matrix().shape()),
        });
    }
    let mut wr = RowMajor::from_matrix(w.matrix());
    let sr = RowMajor::from_matrix(s.matrix());
    euler_rows(&mut wr, &sr, h, eps_renorm);
    Ok(AssignmentMatrix::from_matrix_unchecked(wr.to_matrix()))
}

/// `(1/n) Σ_i Σ_j −W_ij log W_ij`.
pub fn average_entropy(w: &DMatrix<f64>) -> f64 {
    let total: f64 = w.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    total / w.nrows() as f64
}

/// Row-wise argmax (ties to the smallest column), empty columns removed.
pub fn round_to_labels(w: &DMatrix<f64>) -> LabelField {
    let (n, c) = w.shape();
    let raw: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..c {
                if w[(i, j)] > w[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut used = vec![false; c];
    for &l in &raw {
        used[l] = true;
    }
    let label_index_map: Vec<usize> = (0..c).filter(|&j| used[j]).collect();
    let mut remap = vec![0; c];
    for (new, &old) in label_index_map.iter().enumerate() {
        remap[old] = new;
    }
    LabelField {
        labels: raw.into_iter().map(|l| remap[l]).collect(),
        effective: label_index_map.len(),
        label_index_map,
    }
}

/// `W(0) = lift(barycenter, −ε D_0)`.
pub fn initial_assignment(d0: &DMatrix<f64>, eps_init: f64) -> Result<AssignmentMatrix> {
    if d0.ncols() < 2 {
        return Err(Error::InvalidDimension(format!("need c >= 2 columns, got {}", d0.ncols())));
    }
    if d0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite initial distance".into()));
    }
    AssignmentMatrix::barycenter(d0.nrows(), d0.ncols())?.lift_rows(&(d0 * -eps_init))
}

/// Integrates the SAF from `W(0) = lift(barycenter, −ε D_0)`.
pub fn run_saf(
    k: &AffinityOperator,
    nbhd: &NeighborhoodSystem,
    config: &FlowConfig,
    d0: &DMatrix<f64>,
) -> Result<FlowOutcome> {
    run_saf_observed(k, nbhd, config, d0, |_, _| {})
}

/// As [`run_saf`], calling `observe(iter, W)` after every step.
pub fn run_saf_observed<O>(
    k: &AffinityOperator,
    nbhd: &NeighborhoodSystem,
    config: &FlowConfig,
    d0: &DMatrix<f64>,
    mut observe: O,
) -> Result<FlowOutcome>
where
    O: FnMut(usize, &DMatrix<f64>),
{
    config.validate()?;
    let n = k.n();
    if d0.nrows() != n || nbhd.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} vertices"),
            got: format!("D0 {} rows, {} neighborhoods", d0.nrows(), nbhd.len()),
        });
    }
    let w0 = initial_assignment(d0, config.eps_init)?;
    let mut pseudo = false;
    Driver::new(w0, config).run(nbhd, &mut observe, |w| {
        let kw = k.apply(w)?;
        if config.s > 0.0 && !pseudo {
            match selfassign::objective_and_gradient(w, &kw, config.s, InversePolicy::Exact) {
                Ok((_, g)) => return Ok((g, false)),
                Err(Error::RankDeficient { condition }) => {
                    log::info!("W^T W condition {condition:.3e}; switching to pseudo-inverse");
                    pseudo = true;
                }
                Err(e) => return Err(e),
            }
        }
        let policy = if pseudo { InversePolicy::Pseudo } else { InversePolicy::Exact };
        let g = selfassign::grad_objective_from_kw(w, &kw, config.s, policy)?;
        Ok((g, pseudo))
    })
}

/// Supervised assignment flow for fixed distances `D` (`n × c`), started at
/// the barycenter: `L_i = lift(W_i, −D_i / ρ)`.
pub fn run_supervised(distances: &DMatrix<f64>, nbhd: &NeighborhoodSystem, config: &FlowConfig) -> Result<FlowOutcome> {
    config.validate()?;
    if nbhd.len() != distances.nrows() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} neighborhoods", distances.nrows()),
            got: format!("{}", nbhd.len()),
        });
    }
    let w0 = AssignmentMatrix::barycenter(distances.nrows(), distances.ncols())?;
    let neg = -distances;
    Driver::new(w0, config).run(nbhd, &mut |_, _| {}, |_| Ok((neg.clone(), false)))
}

struct Driver<'a> {
    w: RowMajor,
    config: &'a FlowConfig,
}

impl<'a> Driver<'a> {
    fn new(w0: AssignmentMatrix, config: &'a FlowConfig) -> Self {
        Self { w: RowMajor::from_matrix(w0.matrix()), config }
    }

    /// `drift(W)` returns the matrix lifted by `1/ρ` and the pseudo-inverse flag.
    fn run<O, F>(mut self, nbhd: &NeighborhoodSystem, observe: &mut O, mut drift: F) -> Result<FlowOutcome>
    where
        O: FnMut(usize, &DMatrix<f64>),
        F: FnMut(&DMatrix<f64>) -> Result<(DMatrix<f64>, bool)>,
    {
        let cfg = self.config;
        let (n, c) = (self.w.n, self.w.c);
        let mut lik = RowMajor::zeros(n, c);
        let mut sim = RowMajor::zeros(n, c);
        let mut trace = Vec::new();
        let mut wm = self.w.to_matrix();
        let mut entropy = average_entropy(&wm);
        let mut pseudo = false;
        trace.push(record(0, &wm, entropy, pseudo));
        let mut iterations = 0;
        let mut converged = entropy < cfg.entropy_tol;
        while !converged && iterations < cfg.max_iters {
            let (g, flag) = drift(&wm)?;
            pseudo |= flag;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite drift at iteration {iterations}")));
            }
            let gr = RowMajor::from_matrix(&g);
            log_lift_rows(&self.w, &gr, 1.0 / cfg.rho, &mut lik);
            similarity_log_rows(&lik, nbhd, &mut sim);
            euler_rows(&mut self.w, &sim, cfg.h, cfg.eps_renorm);
            iterations += 1;
            wm = self.w.to_matrix();
            entropy = average_entropy(&wm);
            trace.push(record(iterations, &wm, entropy, pseudo));
            observe(iterations, &wm);
            converged = entropy < cfg.entropy_tol;
        }
        if !converged {
            log::warn!("flow stopped after {iterations} iterations with entropy {entropy:.3e}");
        }
        Ok(FlowOutcome {
            labels: round_to_labels(&wm),
            w: AssignmentMatrix::from_matrix_unchecked(wm),
            trace,
            iterations,
            converged,
            final_entropy: entropy,
            pseudo_inverse: pseudo,
        })
    }
}

fn record(iter: usize, w: &DMatrix<f64>, entropy: f64, pseudo: bool) -> IterationRecord {
    let n = w.nrows() as f64;
    let mut masses = Vec::with_capacity(w.ncols());
    let mut trace_b = 0.0;
    for col in w.column_iter() {
        let mass = col.sum();
        trace_b += col.norm_squared() / mass;
        masses.push(mass / n);
    }
    IterationRecord { iter, entropy, trace_b, masses, pseudo_inverse: pseudo }
}

fn check_shapes(w: &AssignmentMatrix, l: &AssignmentMatrix, nbhd: &NeighborhoodSystem) -> Result<()> {
    if w.matrix().shape() != l.matrix().shape() || nbhd.len() != w.nrows() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?} with {} neighborhoods", w.matrix().shape(), w.nrows()),
            got: format!("{:?} with {} neighborhoods", l.matrix().shape(), nbhd.len()),
        });
    }
    Ok(())
}

/// Row-major `n × c` buffer.
struct RowMajor {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl RowMajor {
    fn zeros(n: usize, c: usize) -> Self {
        Self { n, c, data: vec![0.0; n * c] }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (n, c) = m.shape();
        // the transpose's column-major storage is our row-major layout
        Self { n, c, data: m.transpose().as_slice().to_vec() }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.c, &self.data)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }
}

fn lift_rows(w: &RowMajor, x: &RowMajor, scale: f64, out: &mut RowMajor) {
    let c = w.c;
    out.data.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let xs: Vec<f64> = x.row(i).iter().map(|v| v * scale).collect();
        lift_into(w.row(i), &xs, o);
    });
}

// S_i ∝ W_i ⊙ exp(Σ_k w_ik log(L_k / W_i)) = exp(Σ_k w_ik log L_k), since the
// weights sum to one. The geometric mean form avoids the tangent round trip.
/// Rows of `log lift(W_i, scale · x_i)`. Computed in the log domain because
/// near convergence `W_ij e^{x_j}` underflows, and a row of `log 0` from
/// different neighbors would leave the geometric mean undefined.
fn log_lift_rows(w: &RowMajor, x: &RowMajor, scale: f64, out: &mut RowMajor) {
    let c = w.c;
    out.data.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        for ((o, wj), xj) in o.iter_mut().zip(w.row(i)).zip(x.row(i)) {
            *o = wj.ln() + scale * xj;
        }
        let shift = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = shift + o.iter().map(|v| (v - shift).exp()).sum::<f64>().ln();
        o.iter_mut().for_each(|v| *v -= lse);
    });
}

fn similarity_log_rows(log_l: &RowMajor, nbhd: &NeighborhoodSystem, out: &mut RowMajor) {
    let c = log_l.c;
    let uniform = vec![1.0 / c as f64; c];
    out.data.par_chunks_mut(c).enumerate().for_each(|(i, o)| {
        let mut acc = vec![0.0; c];
        for (&k, &wk) in nbhd.neighbors(i).iter().zip(nbhd.weights(i)) {
            for (a, lk) in acc.iter_mut().zip(log_l.row(k)) {
                *a += wk * lk;
            }
        }
        lift_into(&uniform, &acc, o);
    });
}

fn euler_rows(w: &mut RowMajor, s: &RowMajor, h: f64, eps: f64) {
    let c = w.c;
    w.data.par_chunks_mut(c).enumerate().for_each(|(i, row)| {
        let x: Vec<f64> = s.row(i).iter().map(|v| h * v).collect();
        let p = row.to_vec();
        lift_into(&p, &x, row);
        floor_row(row, eps);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{exp_e, exp_e_inv, TangentVector};

    fn am(rows: usize, cols: usize, v: &[f64]) -> AssignmentMatrix {
        AssignmentMatrix::new(DMatrix::from_row_slice(rows, cols, v)).unwrap()
    }

    #[test]
    fn grid_neighborhood_sizes() {
        let nb = NeighborhoodSystem::grid_uniform(5, 5, 3).unwrap();
        assert_eq!(nb.neighbors(12).len(), 9);
        assert!(nb.weights(12).iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-15));
        assert_eq!(nb.neighbors(0).len(), 4);
        assert!(nb.weights(0).iter().all(|&w| (w - 0.25).abs() < 1e-15));
        assert_eq!(nb.neighbors(2).len(), 6);
        assert!(NeighborhoodSystem::grid_uniform(5, 5, 4).is_err());
    }

    #[test]
    fn nlm_on_constant_image_is_uniform() {
        let px = DMatrix::from_element(16, 1, 0.4);
        let nlm = NeighborhoodSystem::grid_nlm(4, 4, 3, &px, 3, 0.1).unwrap();
        let uni = NeighborhoodSystem::grid_uniform(4, 4, 3).unwrap();
        assert_eq!(nlm, uni);
    }

    #[test]
    fn graph_weights_add_degree_to_diagonal() {
        let nb = NeighborhoodSystem::graph_weights(3, &[(0, 1, 2.0), (1, 2, 1.0)]).unwrap();
        // vertex 1: neighbors {0:2, 1:3, 2:1} / 6
        let got: Vec<(usize, f64)> = nb.neighbors(1).iter().copied().zip(nb.weights(1).iter().copied()).collect();
        assert_eq!(got, vec![(0, 2.0 / 6.0), (1, 0.5), (2, 1.0 / 6.0)]);
        let iso = NeighborhoodSystem::graph_weights(2, &[]).unwrap();
        assert_eq!(iso, NeighborhoodSystem::singletons(2));
    }

    #[test]
    fn likelihood_limits() {
        let p = SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap();
        let same = likelihood(&p, &[2.0, 2.0, 2.0], 0.1);
        for (a, b) in same.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let sharp = likelihood(&p, &[0.0, 50.0, 50.0], 0.1);
        assert!(sharp.as_slice()[0] > 1.0 - 1e-12);
        let flat = likelihood(&p, &[0.0, 1.0, 3.0], 1e9);
        for (a, b) in flat.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn underflowing_likelihoods_stay_finite() {
        // each neighbor's likelihood underflows in a different component
        let w = RowMajor::from_matrix(&DMatrix::from_row_slice(2, 2, &[1e-10, 1.0 - 1e-10, 1.0 - 1e-10, 1e-10]));
        let x = RowMajor::from_matrix(&DMatrix::from_row_slice(2, 2, &[-1e4, 0.0, 0.0, -1e4]));
        let nb = NeighborhoodSystem::from_weighted_lists(vec![vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]]).unwrap();
        let mut log_l = RowMajor::zeros(2, 2);
        log_lift_rows(&w, &x, 1.0, &mut log_l);
        let mut s = RowMajor::zeros(2, 2);
        similarity_log_rows(&log_l, &nb, &mut s);
        assert!(s.data.iter().all(|v| v.is_finite()));
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn similarity_matches_tangent_average() {
        let w = am(3, 3, &[0.2, 0.3, 0.5, 0.6, 0.3, 0.1, 0.1, 0.1, 0.8]);
        let l = am(3, 3, &[0.5, 0.25, 0.25, 0.1, 0.7, 0.2, 0.3, 0.3, 0.4]);
        let nb = NeighborhoodSystem::from_weighted_lists(vec![
            vec![(0, 1.0), (1, 2.0), (2, 1.0)],
            vec![(1, 1.0)],
            vec![(1, 1.0), (2, 3.0)],
        ])
        .unwrap();
        let s = similarity(&w, &l, &nb).unwrap();
        for i in 0..3 {
            let wi = w.row(i);
            let mut v = vec![0.0; 3];
            for (&k, &wk) in nb.neighbors(i).iter().zip(nb.weights(i)) {
                let t = exp_e_inv(&wi, &l.row(k));
                for (a, b) in v.iter_mut().zip(t.as_slice()) {
                    *a += wk * b;
                }
            }
            let want = exp_e(&wi, &TangentVector::new(v).unwrap());
            for j in 0..3 {
                assert!((s.matrix()[(i, j)] - want.as_slice()[j]).abs() < 1e-14);
            }
        }
        // singleton neighborhoods return the likelihood itself
        let s1 = similarity(&w, &l, &NeighborhoodSystem::singletons(3)).unwrap();
        assert!((s1.matrix() - l.matrix()).amax() < 1e-15);
        // L_k = W_i for all k gives W_i
        let wc = am(2, 2, &[0.3, 0.7, 0.3, 0.7]);
        let s2 = similarity(&wc, &wc, &NeighborhoodSystem::path(2, 1)).unwrap();
        assert!((s2.matrix() - wc.matrix()).amax() < 1e-15);
    }

    #[test]
    fn euler_step_stays_on_manifold() {
        let w = am(2, 3, &[0.2, 0.3, 0.5, 1.0 - 2e-10, 1e-10, 1e-10]);
        let s = am(2, 3, &[0.1, 0.1, 0.8, 0.98, 0.01, 0.01]);
        let mut cur = w.clone();
        for _ in 0..500 {
            cur = euler_step(&cur, &s, 0.1, EPS_RENORM).unwrap();
            for i in 0..2 {
                let row = cur.row(i);
                assert!(row.as_slice().iter().all(|&v| v >= EPS_RENORM));
                assert!((row.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let zero = euler_step(&w, &s, 0.0, 0.0).unwrap();
        assert!((zero.matrix() - w.matrix()).amax() < 1e-15);
    }

    // Scalar ODE for c = 2: with u = log(W_1 / W_2), the step adds h (S_1 − S_2).
    #[test]
    fn fixed_similarity_matches_scalar_oracle() {
        let (s1, s2, h) = (0.9, 0.1, 0.1);
        let s = am(1, 2, &[s1, s2]);
        let mut w = AssignmentMatrix::barycenter(1, 2).unwrap();
        let mut entropies = Vec::new();
        for k in 1..=200 {
            w = euler_step(&w, &s, h, EPS_RENORM).unwrap();
            let u = k as f64 * h * (s1 - s2);
            let want = 1.0 / (1.0 + (-u).exp());
            assert!((w.matrix()[(0, 0)] - want).abs() < 1e-12);
            entropies.push(average_entropy(w.matrix()));
        }
        assert!(entropies.windows(2).all(|e| e[1] <= e[0]));
    }

    #[test]
    fn entropy_and_rounding() {
        let bary = DMatrix::from_element(5, 4, 0.25);
        assert!((average_entropy(&bary) - 4f64.ln()).abs() < 1e-15);
        let lf = round_to_labels(&bary);
        assert_eq!(lf.labels, vec![0; 5]);
        assert_eq!(lf.effective, 1);
        let w = DMatrix::from_row_slice(4, 5, &[
            0.9, 0.025, 0.025, 0.025, 0.025,
            0.025, 0.025, 0.025, 0.9, 0.025,
            0.025, 0.9, 0.025, 0.025, 0.025,
            0.025, 0.025, 0.025, 0.9, 0.025,
        ]);
        let lf = round_to_labels(&w);
        assert_eq!(lf.effective, 3);
        assert_eq!(lf.label_index_map, vec![0, 1, 3]);
        assert_eq!(lf.labels, vec![0, 2, 1, 2]);
        let again = round_to_labels(&lf.indicator());
        assert_eq!((again.labels, again.effective), (lf.labels.clone(), lf.effective));
        let ordered = lf.first_occurrence_order();
        assert_eq!(ordered.labels, vec![0, 1, 2, 1]);
        assert_eq!(ordered.label_index_map, vec![0, 3, 1]);
    }

    #[test]
    fn supervised_flow_picks_nearest_prototype() {
        let d = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.2, 0.9, 1.0, 0.1, 0.8, 0.0]);
        let out = run_supervised(&d, &NeighborhoodSystem::singletons(4), &FlowConfig::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.labels.labels, vec![0, 0, 1, 1]);
    }
}

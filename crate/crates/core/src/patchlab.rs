//! Patch features invariant under the dihedral group D4 and local translations.
//!
//! A patch is the `side × side` window around an interior pixel, flattened
//! row-major with channels interleaved. The 8 elements of D4 act by index
//! permutations: `(T_σ P)_m = P_{σ(m)}`, so `(T_a T_b P)_m = P_{b(a(m))}`.
//!
//! The asymmetric distance from patch `i` to patch `k` is
//!
//! ```text
//! d(P_i, P_k) = min_{σ ∈ D4, j ∈ N̂_i} Σ_m ‖(T_σ P_j)_m − P_{k;m}‖
//! ```
//!
//! where `N̂_i` are the interior centers inside the window of `i`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::affinity::{self, AffinityOperator};
use crate::error::{Error, Result};

/// Floor for the majorization weights in prototype learning.
pub const MM_FLOOR: f64 = 1e-12;

/// Default number of align/average rounds.
pub const DEFAULT_MM_ROUNDS: usize = 5;

/// Image with a patch size; patches are centered at interior pixels only.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    channels: usize,
    side: usize,
    pixels: Vec<f64>,
    interior: Vec<usize>,
    /// Interior index of each pixel, `usize::MAX` outside.
    interior_of: Vec<usize>,
}

impl PatchGrid {
    /// `pixels` holds `height * width * channels` values, row-major with
    /// channels interleaved.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>, side: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::InvalidParameter(format!("patch side must be odd, got {side}")));
        }
        if channels == 0 {
            return Err(Error::InvalidDimension("image needs at least one channel".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", height * width * channels),
                got: format!("{}", pixels.len()),
            });
        }
        if height < side || width < side {
            return Err(Error::InvalidDimension(format!(
                "image {height}x{width} is smaller than the {side}x{side} patch"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel value".into()));
        }
        let half = side / 2;
        let mut interior = Vec::new();
        let mut interior_of = vec![usize::MAX; height * width];
        for r in half..height - half {
            for c in half..width - half {
                interior_of[r * width + c] = interior.len();
                interior.push(r * width + c);
            }
        }
        Ok(Self { height, width, channels, side, pixels, interior, interior_of })
    }

    /// From an `n × channels` matrix of row-major pixels.
    pub fn from_matrix(height: usize, width: usize, pixels: &DMatrix<f64>, side: usize) -> Result<Self> {
        let data = pixels.transpose().as_slice().to_vec();
        Self::new(height, width, pixels.ncols(), data, side)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Pixels per patch, `side²`.
    pub fn n_p(&self) -> usize {
        self.side * self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Pixel indices of the interior centers, row-major.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn interior_len(&self) -> usize {
        self.interior.len()
    }

    /// Height and width of the interior center grid.
    pub fn interior_shape(&self) -> (usize, usize) {
        (self.height - self.side + 1, self.width - self.side + 1)
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.pixels[p * self.channels..(p + 1) * self.channels]
    }

    /// Pixel index of window position `m` around pixel `center`.
    pub fn window_pixel(&self, center: usize, m: usize) -> usize {
        let half = self.side / 2;
        let (r, c) = (center / self.width, center % self.width);
        let (dr, dc) = (m / self.side, m % self.side);
        (r + dr - half) * self.width + (c + dc - half)
    }

    /// The patch of interior center `i`.
    pub fn patch(&self, i: usize) -> Vec<f64> {
        let center = self.interior[i];
        let mut out = Vec::with_capacity(self.n_p() * self.channels);
        for m in 0..self.n_p() {
            out.extend_from_slice(self.pixel(self.window_pixel(center, m)));
        }
        out
    }

    /// `N̂_i`: interior centers within the window of `i`, `i` itself first,
    /// then row-major.
    pub fn translations(&self, i: usize) -> Vec<usize> {
        let half = self.side / 2;
        let center = self.interior[i];
        let (r, c) = (center / self.width, center % self.width);
        let mut out = vec![i];
        for rr in r.saturating_sub(half)..=(r + half).min(self.height - 1) {
            for cc in c.saturating_sub(half)..=(c + half).min(self.width - 1) {
                let j = self.interior_of[rr * self.width + cc];
                if j != usize::MAX && j != i {
                    out.push(j);
                }
            }
        }
        out
    }
}

/// One of the 8 symmetries of the square, as a permutation of patch positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct D4Element {
    /// Quarter turns applied after the optional flip.
    pub rotation: u8,
    /// Mirror columns before rotating.
    pub flip: bool,
    perm: Vec<usize>,
}

impl D4Element {
    pub fn new(side: usize, rotation: u8, flip: bool) -> Self {
        let h = (side / 2) as isize;
        let s = side as isize;
        let perm = (0..side * side)
            .map(|m| {
                let (mut dr, mut dc) = ((m / side) as isize - h, (m % side) as isize - h);
                if flip {
                    dc = -dc;
                }
                for _ in 0..rotation % 4 {
                    (dr, dc) = (dc, -dr);
                }
                ((dr + h) * s + (dc + h)) as usize
            })
            .collect();
        Self { rotation: rotation % 4, flip, perm }
    }

    pub fn identity(side: usize) -> Self {
        Self::new(side, 0, false)
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(m, &p)| m == p)
    }

    /// Index 0..8 in the order of [`d4_group`].
    pub fn index(&self) -> usize {
        self.rotation as usize + if self.flip { 4 } else { 0 }
    }

    /// The element `T_self ∘ T_other`: `(T_a T_b P)_m = P_{b(a(m))}`.
    pub fn compose(&self, other: &D4Element) -> Vec<usize> {
        self.perm.iter().map(|&a| other.perm[a]).collect()
    }

    /// Inverse permutation.
    pub fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (m, &p) in self.perm.iter().enumerate() {
            inv[p] = m;
        }
        inv
    }
}

/// All 8 elements; identity first, then rotations, then flipped rotations.
pub fn d4_group(side: usize) -> Vec<D4Element> {
    let mut out = Vec::with_capacity(8);
    for flip in [false, true] {
        for rot in 0..4 {
            out.push(D4Element::new(side, rot, flip));
        }
    }
    out
}

/// `T_σ P` for a patch with `channels` values per position.
pub fn d4_apply(sigma: &D4Element, patch: &[f64], channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(patch.len());
    for &p in &sigma.perm {
        out.extend_from_slice(&patch[p * channels..(p + 1) * channels]);
    }
    out
}

/// `Σ_m ‖a_{perm(m)} − b_m‖` with per-position Euclidean norms.
pub fn permuted_distance(a: &[f64], perm: &[usize], b: &[f64], channels: usize) -> f64 {
    if channels == 1 {
        return perm.iter().zip(b).map(|(&p, bv)| (a[p] - bv).abs()).sum();
    }
    let mut total = 0.0;
    for (m, &p) in perm.iter().enumerate() {
        let mut acc = 0.0;
        for q in 0..channels {
            let d = a[p * channels + q] - b[m * channels + q];
            acc += d * d;
        }
        total += acc.sqrt();
    }
    total
}

/// `min_σ Σ_m ‖(T_σ a)_m − b_m‖` and the index of the minimizing element
/// (first in group order on ties).
pub fn orbit_distance(a: &[f64], b: &[f64], group: &[D4Element], channels: usize) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (g, sigma) in group.iter().enumerate() {
        let d = permuted_distance(a, &sigma.perm, b, channels);
        if d < best.0 {
            best = (d, g);
        }
    }
    best
}

/// Flattened patches of all interior centers, one per row.
pub fn extract_patches(grid: &PatchGrid) -> DMatrix<f64> {
    let len = grid.n_p() * grid.channels;
    let rows: Vec<Vec<f64>> = (0..grid.interior_len()).into_par_iter().map(|i| grid.patch(i)).collect();
    DMatrix::from_fn(rows.len(), len, |i, j| rows[i][j])
}

/// Asymmetric distance between interior centers `i` and `k`.
pub fn asym_patch_distance(grid: &PatchGrid, i: usize, k: usize) -> f64 {
    let group = d4_group(grid.side);
    let target = grid.patch(k);
    grid.translations(i)
        .into_iter()
        .map(|j| orbit_distance(&grid.patch(j), &target, &group, grid.channels).0)
        .fold(f64::INFINITY, f64::min)
}

/// `min(d(P_i, P_k), d(P_k, P_i))`.
pub fn sym_patch_distance(grid: &PatchGrid, i: usize, k: usize) -> f64 {
    asym_patch_distance(grid, i, k).min(asym_patch_distance(grid, k, i))
}

/// All asymmetric distances between interior patches, computed once.
///
/// Uses `d(P_i, P_k) = min_{j ∈ N̂_i} D'(j, k)` with the orbit distances
/// `D'(j, k) = min_σ Σ_m ‖(T_σ P_j)_m − P_{k;m}‖`.
#[derive(Debug, Clone)]
pub struct PatchDistances {
    n: usize,
    asym: Vec<f64>,
}

impl PatchDistances {
    pub fn compute(grid: &PatchGrid) -> Self {
        let n = grid.interior_len();
        let patches: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| grid.patch(i)).collect();
        let group = d4_group(grid.side);
        let ch = grid.channels;
        let orbit: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|j| {
                let pj = &patches[j];
                let group = &group;
                patches.iter().map(move |pk| orbit_distance(pj, pk, group, ch).0)
            })
            .collect();
        let asym = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let trans = grid.translations(i);
                let orbit = &orbit;
                (0..n).map(move |k| trans.iter().map(|&j| orbit[j * n + k]).fold(f64::INFINITY, f64::min))
            })
            .collect();
        Self { n, asym }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn asym(&self, i: usize, k: usize) -> f64 {
        self.asym[i * self.n + k]
    }

    pub fn sym(&self, i: usize, k: usize) -> f64 {
        self.asym(i, k).min(self.asym(k, i))
    }

    /// Gaussian affinity of the symmetric distance.
    pub fn affinity(&self, sigma: f64) -> Result<AffinityOperator> {
        affinity::gaussian_from_distances(self.n, sigma, |i, k| self.sym(i, k))
    }
}

/// On-demand distances for grids too large for the dense table.
pub struct LazyPatchDistances<'a> {
    grid: &'a PatchGrid,
    patches: Vec<Vec<f64>>,
    group: Vec<D4Element>,
    translations: Vec<Vec<usize>>,
}

impl<'a> LazyPatchDistances<'a> {
    pub fn new(grid: &'a PatchGrid) -> Self {
        let n = grid.interior_len();
        let patches = (0..n).into_par_iter().map(|i| grid.patch(i)).collect();
        let translations = (0..n).into_par_iter().map(|i| grid.translations(i)).collect();
        Self { grid, patches, group: d4_group(grid.side), translations }
    }

    fn orbit_to(&self, k: usize) -> Vec<f64> {
        let ch = self.grid.channels;
        self.patches
            .par_iter()
            .map(|pj| orbit_distance(pj, &self.patches[k], &self.group, ch).0)
            .collect()
    }

    /// `d(P_i, P_k)` for all `i`.
    pub fn asym_to(&self, k: usize) -> Vec<f64> {
        let orbit = self.orbit_to(k);
        self.translations
            .par_iter()
            .map(|t| t.iter().map(|&j| orbit[j]).fold(f64::INFINITY, f64::min))
            .collect()
    }

    /// `d(P_k, P_i)` for all `i`.
    pub fn asym_from(&self, k: usize) -> Vec<f64> {
        let ch = self.grid.channels;
        let mut best = vec![f64::INFINITY; self.patches.len()];
        for &j in &self.translations[k] {
            let row: Vec<f64> = self
                .patches
                .par_iter()
                .map(|pi| orbit_distance(&self.patches[j], pi, &self.group, ch).0)
                .collect();
            for (b, v) in best.iter_mut().zip(row) {
                *b = b.min(v);
            }
        }
        best
    }

    /// `d^sym(P_i, P_k)` for all `i`.
    pub fn sym_column(&self, k: usize) -> Vec<f64> {
        self.asym_to(k).into_iter().zip(self.asym_from(k)).map(|(a, b)| a.min(b)).collect()
    }
}

/// A learned prototype patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrototype {
    pub values: Vec<f64>,
    pub side: usize,
    pub channels: usize,
    /// Column of the assignment matrix it represents.
    pub cluster: usize,
    /// `Σ_i q_i d(P_i, P)²` after each align step.
    pub objective_trace: Vec<f64>,
}

impl PatchPrototype {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

struct Alignment {
    dist: f64,
    sigma: usize,
    source: usize,
}

/// Best `(σ, l)` over `N̂_i` bringing a data patch onto `target`; ties keep
/// `l = i` and the identity.
fn align(grid: &PatchGrid, patches: &[Vec<f64>], group: &[D4Element], i: usize, target: &[f64]) -> Alignment {
    let mut best = Alignment { dist: f64::INFINITY, sigma: 0, source: i };
    for l in grid.translations(i) {
        let (d, g) = orbit_distance(&patches[l], target, group, grid.channels);
        if d < best.dist {
            best = Alignment { dist: d, sigma: g, source: l };
        }
    }
    best
}

/// Majorize–minimize for `argmin_P Σ_i q_i d(P_i, P)²` from `init`.
fn refine(
    grid: &PatchGrid,
    patches: &[Vec<f64>],
    group: &[D4Element],
    members: &[(usize, f64)],
    init: Vec<f64>,
    rounds: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ch = grid.channels;
    let npix = grid.n_p();
    let mut proto = init;
    let mut trace = Vec::with_capacity(rounds + 1);
    for round in 0..=rounds {
        let aligned: Vec<(f64, Vec<f64>, f64)> = members
            .par_iter()
            .map(|&(i, q)| {
                let a = align(grid, patches, group, i, &proto);
                (q, d4_apply(&group[a.sigma], &patches[a.source], ch), a.dist)
            })
            .collect();
        trace.push(aligned.iter().map(|(q, _, t)| q * t * t).sum());
        if round == rounds {
            break;
        }
        let mut num = vec![0.0; proto.len()];
        let mut den = vec![0.0; npix];
        for (q, a, t) in &aligned {
            let floor = MM_FLOOR * t.max(MM_FLOOR);
            for m in 0..npix {
                let r = (0..ch)
                    .map(|c| (a[m * ch + c] - proto[m * ch + c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let u = q * t.max(MM_FLOOR) / r.max(floor);
                den[m] += u;
                for c in 0..ch {
                    num[m * ch + c] += u * a[m * ch + c];
                }
            }
        }
        for m in 0..npix {
            if den[m] > 0.0 {
                for c in 0..ch {
                    proto[m * ch + c] = num[m * ch + c] / den[m];
                }
            }
        }
    }
    (proto, trace)
}

/// Medoid candidates examined per cluster without a distance table.
pub const LAZY_MEDOID_CANDIDATES: usize = 256;

/// Learns one prototype per nonempty column of `w` (rows over interior centers).
///
/// Alternates optimal transforms per member with per-pixel reweighted means.
/// Two starts are refined, the weighted average of untransformed patches and
/// the weighted medoid under the asymmetric distance; the lower objective wins.
/// The medoid start matters: averaging rotated copies of one structure gives a
/// blurred patch that the alternation cannot leave.
pub fn learn_patch_prototypes(w: &DMatrix<f64>, grid: &PatchGrid, rounds: usize) -> Result<Vec<PatchPrototype>> {
    learn_patch_prototypes_with(w, grid, rounds, None)
}

/// As [`learn_patch_prototypes`], reusing a precomputed distance table.
pub fn learn_patch_prototypes_with(
    w: &DMatrix<f64>,
    grid: &PatchGrid,
    rounds: usize,
    table: Option<&PatchDistances>,
) -> Result<Vec<PatchPrototype>> {
    let n = grid.interior_len();
    if w.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} interior rows"),
            got: format!("{}", w.nrows()),
        });
    }
    if let Some(t) = table {
        if t.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("distance table over {n} centers"),
                got: format!("{}", t.len()),
            });
        }
    }
    let patches: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| grid.patch(i)).collect();
    let translations: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| grid.translations(i)).collect();
    let group = d4_group(grid.side);
    let mut out = Vec::new();
    for j in 0..w.ncols() {
        let mass = w.column(j).sum();
        if !(mass > 0.0) {
            continue;
        }
        let members: Vec<(usize, f64)> = (0..n)
            .filter(|&i| w[(i, j)] > 0.0)
            .map(|i| (i, w[(i, j)] / mass))
            .collect();
        let len = patches[0].len();
        let mut average = vec![0.0; len];
        for &(i, q) in &members {
            for (a, v) in average.iter_mut().zip(&patches[i]) {
                *a += q * v;
            }
        }
        let medoid = weighted_medoid(grid, &patches, &translations, &group, &members, table);
        let (p1, t1) = refine(grid, &patches, &group, &members, average, rounds);
        let (p2, t2) = refine(grid, &patches, &group, &members, patches[medoid].clone(), rounds);
        let (values, objective_trace) = if t2.last() < t1.last() { (p2, t2) } else { (p1, t1) };
        out.push(PatchPrototype { values, side: grid.side, channels: grid.channels, cluster: j, objective_trace });
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("no nonempty cluster to learn prototypes from".into()));
    }
    Ok(out)
}

/// Member `k` minimizing `Σ_i q_i d(P_i, P_k)²`; first on ties.
fn weighted_medoid(
    grid: &PatchGrid,
    patches: &[Vec<f64>],
    translations: &[Vec<usize>],
    group: &[D4Element],
    members: &[(usize, f64)],
    table: Option<&PatchDistances>,
) -> usize {
    let candidates: Vec<usize> = match table {
        Some(_) => members.iter().map(|m| m.0).collect(),
        None => {
            let step = members.len().div_ceil(LAZY_MEDOID_CANDIDATES);
            members.iter().step_by(step.max(1)).map(|m| m.0).collect()
        }
    };
    let score = |k: usize| -> f64 {
        match table {
            Some(t) => members.iter().map(|&(i, q)| q * t.asym(i, k).powi(2)).sum(),
            None => {
                let orbit: Vec<f64> = patches
                    .iter()
                    .map(|pj| orbit_distance(pj, &patches[k], group, grid.channels).0)
                    .collect();
                members
                    .iter()
                    .map(|&(i, q)| {
                        let d = translations[i].iter().map(|&j| orbit[j]).fold(f64::INFINITY, f64::min);
                        q * d * d
                    })
                    .sum()
            }
        }
    };
    let scores: Vec<f64> = candidates.par_iter().map(|&k| score(k)).collect();
    let mut best = 0;
    for (c, &v) in scores.iter().enumerate() {
        if v < scores[best] {
            best = c;
        }
    }
    candidates[best]
}

/// Optimal transform of the assigned prototype at one interior center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformRecord {
    /// Index into the prototype list.
    pub prototype: usize,
    /// Index of `σ*` in [`d4_group`] order.
    pub sigma: usize,
    /// Interior index of the source window `l*`.
    pub source: usize,
}

/// Result of explaining an image by prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Same layout as [`PatchGrid::pixels`].
    pub image: Vec<f64>,
    /// Number of patch entries averaged into each pixel.
    pub counts: Vec<usize>,
    pub transforms: Vec<TransformRecord>,
}

impl Reconstruction {
    /// Mean absolute error against the grid over pixels with contributions.
    pub fn covered_mae(&self, grid: &PatchGrid) -> f64 {
        let ch = grid.channels;
        let mut total = 0.0;
        let mut count = 0usize;
        for (p, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                for q in 0..ch {
                    total += (self.image[p * ch + q] - grid.pixels[p * ch + q]).abs();
                }
                count += ch;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Places the assigned prototype of every interior center, transformed back
/// by its optimal `(σ*, l*)`, onto the window `l*`, and averages overlapping
/// entries. Pixels without contributions keep their input value.
///
/// `assignment[i]` indexes `prototypes`.
pub fn assign_and_reconstruct(
    prototypes: &[PatchPrototype],
    grid: &PatchGrid,
    assignment: &[usize],
) -> Result<Reconstruction> {
    let n = grid.interior_len();
    if assignment.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} assignments"),
            got: format!("{}", assignment.len()),
        });
    }
    let ch = grid.channels;
    let expected = grid.n_p() * ch;
    for p in prototypes {
        if p.values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("prototype of {expected} values"),
                got: format!("{}", p.values.len()),
            });
        }
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= prototypes.len()) {
        return Err(Error::InvalidInput(format!("assignment {bad} out of range")));
    }
    let patches: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| grid.patch(i)).collect();
    let group = d4_group(grid.side);
    let transforms: Vec<TransformRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = align(grid, &patches, &group, i, &prototypes[assignment[i]].values);
            TransformRecord { prototype: assignment[i], sigma: a.sigma, source: a.source }
        })
        .collect();
    let npix = grid.height * grid.width;
    let mut sum = vec![0.0; npix * ch];
    let mut counts = vec![0usize; npix];
    for t in &transforms {
        let proto = &prototypes[t.prototype].values;
        let perm = group[t.sigma].perm();
        let center = grid.interior[t.source];
        // T_σ P_l ≈ P*, so P_l ≈ T_σ^{-1} P*: entry m of P* lands on position σ(m)
        for (m, &pm) in perm.iter().enumerate() {
            let p = grid.window_pixel(center, pm);
            counts[p] += 1;
            for q in 0..ch {
                sum[p * ch + q] += proto[m * ch + q];
            }
        }
    }
    let image = (0..npix * ch)
        .map(|idx| {
            let c = counts[idx / ch];
            if c > 0 {
                sum[idx] / c as f64
            } else {
                grid.pixels[idx]
            }
        })
        .collect();
    Ok(Reconstruction { image, counts, transforms })
}

//! Greedy k-center seeding (farthest-point traversal).
//!
//! For a metric the achieved covering radius is at most twice the optimum.
//! The seeds only perturb the barycentric initialization of the flow.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::affinity::FeatureSet;
use crate::error::{Error, Result};

/// Selected centers and the covering radius `max_i min_j d(f_i, f_{c_j})`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    pub indices: Vec<usize>,
    pub radius: f64,
}

/// Farthest-point traversal over `n` points with distance `dist(point, center)`.
///
/// The first center is drawn uniformly with a ChaCha8 stream seeded by `seed`;
/// every further center maximizes the distance to the current set, with ties
/// going to the smallest index.
pub fn greedy_k_center_by<D>(n: usize, k: usize, seed: u64, dist: D) -> Result<SeedSet>
where
    D: Fn(usize, usize) -> f64 + Sync,
{
    let column = |c: usize| (0..n).into_par_iter().map(|i| dist(i, c)).collect();
    Ok(greedy_k_center_columns(n, k, seed, column)?.0)
}

/// As [`greedy_k_center_by`] with `column(c)[i] = d(f_i, f_c)`, also
/// returning the `n × k` matrix of those columns, i.e. the seed distances.
pub fn greedy_k_center_columns<F>(n: usize, k: usize, seed: u64, column: F) -> Result<(SeedSet, DMatrix<f64>)>
where
    F: Fn(usize) -> Vec<f64>,
{
    if n == 0 {
        return Err(Error::InvalidDimension("no points to seed from".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParameter(format!("need 1 <= k <= n = {n}, got k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut indices = Vec::with_capacity(k);
    let mut distances = DMatrix::zeros(n, k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut next = first;
    loop {
        let mut col = column(next);
        if col.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("distance column of length {n}"),
                got: format!("{}", col.len()),
            });
        }
        col[next] = 0.0;
        for (i, &d) in col.iter().enumerate() {
            distances[(i, indices.len())] = d;
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        indices.push(next);
        if indices.len() == k {
            break;
        }
        next = farthest(&nearest, &indices);
    }
    let radius = nearest.iter().copied().fold(0.0, f64::max);
    Ok((SeedSet { indices, radius }, distances))
}

/// Unchosen index with the largest distance to the centers, smallest on ties.
fn farthest(nearest: &[f64], chosen: &[usize]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &d) in nearest.iter().enumerate() {
        if chosen.contains(&i) {
            continue;
        }
        if best.map_or(true, |b| d > nearest[b]) {
            best = Some(i);
        }
    }
    best.expect("k <= n leaves an unchosen point")
}

/// Greedy k-center on feature rows with their natural distance.
pub fn greedy_k_center(features: &FeatureSet, k: usize, seed: u64) -> Result<SeedSet> {
    greedy_k_center_by(features.len(), k, seed, |i, j| features.distance(i, j))
}

/// `D_{ij} = d(f_i, f_{seed_j})` for an arbitrary distance.
pub fn seed_distances_by<D>(n: usize, seeds: &SeedSet, dist: D) -> DMatrix<f64>
where
    D: Fn(usize, usize) -> f64 + Sync,
{
    let k = seeds.indices.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            seeds
                .indices
                .iter()
                .map(|&c| if c == i { 0.0 } else { dist(i, c) })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, k, |i, j| rows[i][j])
}

pub fn seed_distances(features: &FeatureSet, seeds: &SeedSet) -> DMatrix<f64> {
    seed_distances_by(features.len(), seeds, |i, j| features.distance(i, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> FeatureSet {
        FeatureSet::euclidean(DMatrix::from_column_slice(points.len(), 1, points)).unwrap()
    }

    #[test]
    fn hand_evaluated_distances() {
        let f = line(&[0.0, 1.0, 2.0]);
        let seeds = SeedSet { indices: vec![0, 2], radius: 1.0 };
        let d = seed_distances(&f, &seeds);
        assert_eq!(d, DMatrix::from_row_slice(3, 2, &[0.0, 2.0, 1.0, 1.0, 2.0, 0.0]));
    }

    #[test]
    fn full_cover_has_zero_radius() {
        let f = line(&[0.0, 0.5, 3.0, 7.0]);
        let s = greedy_k_center(&f, 4, 1).unwrap();
        assert_eq!(s.radius, 0.0);
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_center_radius() {
        let pts = [0.0, 0.5, 3.0, 7.0];
        let f = line(&pts);
        let s = greedy_k_center(&f, 1, 9).unwrap();
        let c = pts[s.indices[0]];
        let want = pts.iter().map(|p| (p - c).abs()).fold(0.0, f64::max);
        assert_eq!(s.radius, want);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        // all distances equal: after the first center the next must be index 0 or 1
        let n = 5;
        let s = greedy_k_center_by(n, 3, 4, |i, j| if i == j { 0.0 } else { 1.0 }).unwrap();
        let first = s.indices[0];
        let expect: Vec<usize> = (0..n).filter(|&i| i != first).take(2).collect();
        assert_eq!(&s.indices[1..], &expect[..]);
    }

    #[test]
    fn duplicates_still_give_distinct_centers() {
        let f = line(&[1.0, 1.0, 1.0]);
        let s = greedy_k_center(&f, 3, 2).unwrap();
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn columns_are_seed_distances() {
        let f = line(&[0.0, 1.0, 4.0, 9.0, 16.0]);
        let (s, d) = greedy_k_center_columns(5, 3, 5, |c| (0..5).map(|i| f.distance(i, c)).collect()).unwrap();
        assert_eq!(s, greedy_k_center(&f, 3, 5).unwrap());
        assert_eq!(d, seed_distances(&f, &s));
    }

    #[test]
    fn seeded_determinism_and_errors() {
        let f = line(&[0.0, 1.0, 4.0, 9.0, 16.0]);
        assert_eq!(greedy_k_center(&f, 3, 5).unwrap(), greedy_k_center(&f, 3, 5).unwrap());
        assert!(greedy_k_center(&f, 6, 0).is_err());
        assert!(greedy_k_center(&f, 0, 0).is_err());
    }
}

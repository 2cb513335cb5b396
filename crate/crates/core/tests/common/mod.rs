#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const COLORS: [[f64; 3]; 3] = [[0.9, 0.15, 0.1], [0.1, 0.8, 0.2], [0.15, 0.2, 0.9]];

/// Ground-truth region of pixel (r, c) in a `side × side` three-region image:
/// a disc on a background split by a diagonal.
pub fn three_region_label(r: usize, c: usize, side: usize) -> usize {
    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
    let s = side as f64;
    let (cy, cx, rad) = (0.62 * s, 0.35 * s, 0.22 * s);
    if (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad {
        1
    } else if x + 0.6 * y < 0.95 * s {
        0
    } else {
        2
    }
}

/// Noisy three-color image as `n × 3` pixel features plus ground truth.
pub fn three_color_image(side: usize, noise: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).unwrap();
    let n = side * side;
    let truth: Vec<usize> = (0..n).map(|i| three_region_label(i / side, i % side, side)).collect();
    let mut px = DMatrix::zeros(n, 3);
    for i in 0..n {
        for ch in 0..3 {
            px[(i, ch)] = COLORS[truth[i]][ch] + normal.sample(&mut rng);
        }
    }
    (px, truth)
}

/// Two 7×7 grayscale base patches with no D4 symmetry.
pub fn base_patches() -> [Vec<f64>; 2] {
    let side = 7;
    let edge = (0..side * side)
        .map(|m| {
            let (r, c) = ((m / side) as f64, (m % side) as f64);
            if c + 0.5 * r < 4.2 { 0.15 } else { 0.85 }
        })
        .collect();
    let blob = (0..side * side)
        .map(|m| {
            let (r, c) = ((m / side) as f64 - 2.0, (m % side) as f64 - 4.0);
            let v = 0.2 + 0.7 * (-(r * r + c * c) / 3.0).exp();
            if m % side == 0 { 0.5 } else { v }
        })
        .collect();
    [edge, blob]
}

/// Image of `tiles × tiles` blocks, each a random D4 transform of a random
/// base patch. Returns the grayscale pixels, row-major.
pub fn tiled_d4_image(tiles: usize, seed: u64) -> (usize, Vec<f64>) {
    use rand::Rng;
    use saflow::patchlab::{d4_apply, d4_group};
    let side = 7;
    let bases = base_patches();
    let group = d4_group(side);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = tiles * side;
    let mut img = vec![0.0; dim * dim];
    for tr in 0..tiles {
        for tc in 0..tiles {
            let base = &bases[rng.gen_range(0..2)];
            let t = d4_apply(&group[rng.gen_range(0..8)], base, 1);
            for m in 0..side * side {
                let (r, c) = (tr * side + m / side, tc * side + m % side);
                img[r * dim + c] = t[m];
            }
        }
    }
    (dim, img)
}

/// Scatter matrices from their definitions as sums of outer products.
pub fn definitional_scatter(f: &DMatrix<f64>, labels: &[usize], c: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = f.shape();
    let row = |i: usize| DVector::from_iterator(d, f.row(i).iter().copied());
    let mu = (0..n).map(row).fold(DVector::zeros(d), |a, b| a + b) / n as f64;
    let mut st = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    let mut sb = DMatrix::zeros(d, d);
    for j in 0..c {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
        if members.is_empty() {
            continue;
        }
        let mj = members.iter().map(|&i| row(i)).fold(DVector::zeros(d), |a, b| a + b) / members.len() as f64;
        for &i in &members {
            let e = row(i) - &mj;
            sw += &e * e.transpose();
        }
        let e = &mj - &mu;
        sb += &e * e.transpose() * members.len() as f64;
    }
    for i in 0..n {
        let e = row(i) - &mu;
        st += &e * e.transpose();
    }
    (st / n as f64, sw / n as f64, sb / n as f64)
}

//! Feature standardisation and seeded k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FilterError;

pub const MAX_ITERATIONS: usize = 100;
const VARIANCE_FLOOR: f64 = 1e-12;

/// Row-major `n x dim` matrix of standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Standardized {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Per-dimension zero mean and unit (population) variance. Dimensions with
/// variance below 1e-12 are only centred.
pub fn standardize_features(features: &[f32], dim: usize) -> Result<Standardized, FilterError> {
    if dim == 0 {
        return Err(FilterError::InvalidConfig("feature dimension is zero".into()));
    }
    let n = features.len() / dim;
    if n < 2 {
        return Err(FilterError::TooFewPoints { needed: 2, got: n });
    }
    let mut mean = vec![0.0f64; dim];
    for row in features.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; dim];
    for row in features.chunks_exact(dim) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let div: Vec<f64> =
        var.iter().map(|s| s / n as f64).map(|v| if v < VARIANCE_FLOOR { 1.0 } else { v.sqrt() }).collect();
    let mut data = Vec::with_capacity(n * dim);
    for row in features.chunks_exact(dim) {
        for ((&v, m), d) in row.iter().zip(&mean).zip(&div) {
            data.push((v as f64 - m) / d);
        }
    }
    Ok(Standardized { n, dim, data })
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = dist2(row, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Columns holding one value for every row cannot separate clusters.
fn drop_constant_columns(x: &Standardized) -> Standardized {
    let first = x.row(0);
    let keep: Vec<usize> = (0..x.dim).filter(|&c| (1..x.n).any(|i| x.data[i * x.dim + c] != first[c])).collect();
    if keep.len() == x.dim {
        return x.clone();
    }
    // A single zero column keeps the matrix well formed when nothing varies.
    if keep.is_empty() {
        return Standardized { n: x.n, dim: 1, data: vec![0.0; x.n] };
    }
    let data = (0..x.n).flat_map(|i| keep.iter().map(move |&c| x.data[i * x.dim + c])).collect();
    Standardized { n: x.n, dim: keep.len(), data }
}

/// k-means++ seeding from ChaCha8(seed), then Lloyd iterations until the
/// assignment stops changing or [`MAX_ITERATIONS`] is reached. A cluster
/// that empties is re-seeded with the point farthest from its current
/// centroid (lowest index on ties).
pub fn kmeans(x: &Standardized, k: usize, seed: u64) -> Result<Vec<usize>, FilterError> {
    let n = x.n;
    if k == 0 {
        return Err(FilterError::InvalidConfig("k must be at least 1".into()));
    }
    if n < k {
        return Err(FilterError::TooFewPoints { needed: k, got: n });
    }
    let x = &drop_constant_columns(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(x.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(x.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(x.row(pick).to_vec());
        let c = centroids.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(x.row(i), c));
        }
    }

    let mut assign: Vec<usize> = (0..n).map(|i| nearest(x.row(i), &centroids).0).collect();
    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![vec![0.0f64; x.dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, dist2(x.row(i), &centroids[assign[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                counts[assign[far]] -= 1;
                assign[far] = c;
                counts[c] = 1;
                centroids[c] = x.row(far).to_vec();
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(x.row(i), &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

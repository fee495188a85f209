//! k-means++ seeding (used to initialize codebooks) and plain Lloyd
//! iterations (the reference quantizer EMA training is measured against).

use rand::Rng;

use crate::error::{config_err, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of a point drawn with probability proportional to `weights`, or
/// uniformly when every weight is zero.
fn draw_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return rng.random_range(0..weights.len());
    }
    let target = rng.random_range(0.0..total);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    // Rounding left the target past the last non-zero weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Extends `centers` (flat, `dim`-wide) to `k` rows by D² sampling from
/// `points`. Distances are measured to every center already present.
pub(crate) fn kmeanspp_extend(
    points: &[f64],
    dim: usize,
    centers: &mut Vec<f64>,
    k: usize,
    rng: &mut impl Rng,
) {
    let n = points.len() / dim;
    if n == 0 || centers.len() / dim >= k {
        return;
    }
    if centers.is_empty() {
        let first = rng.random_range(0..n);
        centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    }
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| {
            centers
                .chunks_exact(dim)
                .map(|c| sq_dist(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    while centers.len() / dim < k {
        let pick = draw_weighted(rng, &d2);
        let chosen = points[pick * dim..(pick + 1) * dim].to_vec();
        for (d, p) in d2.iter_mut().zip(points.chunks_exact(dim)) {
            *d = d.min(sq_dist(p, &chosen));
        }
        centers.extend_from_slice(&chosen);
    }
}

/// Lloyd's algorithm from k-means++ seeds. Returns `k × dim` centroids.
/// Empty clusters keep their previous centroid.
pub fn kmeans_reference(
    points: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return config_err("point buffer is not a whole number of vectors");
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return config_err(format!("cannot fit {k} centroids to {n} points"));
    }
    let mut centers = Vec::with_capacity(k * dim);
    kmeanspp_extend(points, dim, &mut centers, k, rng);
    lloyd(points, dim, &mut centers, iters);
    Ok(centers)
}

/// Up to `iters` Lloyd iterations in place; stops early once no centroid moves.
pub(crate) fn lloyd(points: &[f64], dim: usize, centers: &mut [f64], iters: usize) {
    let k = centers.len() / dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        sums.fill(0.0);
        counts.fill(0);
        for p in points.chunks_exact(dim) {
            let c = nearest(centers, dim, p).0;
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                let v = sums[c * dim + j] / counts[c] as f64;
                if v != centers[c * dim + j] {
                    moved = true;
                }
                centers[c * dim + j] = v;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Nearest center and its squared distance; ties go to the lowest index.
pub fn nearest(centers: &[f64], dim: usize, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean squared distance from each point to its nearest center.
pub fn quantization_mse(centers: &[f64], dim: usize, points: &[f64]) -> f64 {
    let n = points.len() / dim;
    points
        .chunks_exact(dim)
        .map(|p| nearest(centers, dim, p).1)
        .sum::<f64>()
        / n as f64
}

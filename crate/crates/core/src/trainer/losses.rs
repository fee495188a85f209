//! Regularization terms of the training objective and their gradients.

use crate::error::{shape_err, Result};
use crate::tensor::{FeatureMap, ProjectionWeights};

/// `β · mean((z − z_q)²)`. `z_q` is a constant: no gradient reaches the
/// codebooks through this term.
pub fn commitment_loss(z: &FeatureMap, z_q: &FeatureMap, beta: f64) -> Result<f64> {
    if !z.same_shape(z_q) {
        return shape_err(format!(
            "commitment loss on {:?} vs {:?}",
            z.shape(),
            z_q.shape()
        ));
    }
    Ok(beta * z.mse(z_q)?)
}

/// `W Wᵀ − I` for the `out × in` weight matrix.
fn gram_minus_identity(w: &ProjectionWeights) -> Vec<f64> {
    let (rows, cols) = (w.out_channels(), w.in_channels());
    let m = w.weights();
    let mut g = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i..rows {
            let dot: f64 = m[i * cols..(i + 1) * cols]
                .iter()
                .zip(&m[j * cols..(j + 1) * cols])
                .map(|(a, b)| a * b)
                .sum();
            let v = dot - if i == j { 1.0 } else { 0.0 };
            g[i * rows + j] = v;
            g[j * rows + i] = v;
        }
    }
    g
}

/// `λ · ‖W Wᵀ − I‖_F²` on the channel-reduction weights (rows = `C_r`).
pub fn ortho_loss(w: &ProjectionWeights, lambda: f64) -> f64 {
    lambda * gram_minus_identity(w).iter().map(|v| v * v).sum::<f64>()
}

/// `∂/∂W` of [`ortho_loss`]: `4λ (W Wᵀ − I) W`, row-major `out × in`.
pub fn ortho_loss_gradient(w: &ProjectionWeights, lambda: f64) -> Vec<f64> {
    let (rows, cols) = (w.out_channels(), w.in_channels());
    let g = gram_minus_identity(w);
    let m = w.weights();
    let mut grad = vec![0.0; rows * cols];
    for i in 0..rows {
        let out = &mut grad[i * cols..(i + 1) * cols];
        for k in 0..rows {
            let s = 4.0 * lambda * g[i * rows + k];
            for (o, x) in out.iter_mut().zip(&m[k * cols..(k + 1) * cols]) {
                *o += s * x;
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights(rows: usize, cols: usize, w: Vec<f64>) -> ProjectionWeights {
        ProjectionWeights::new(cols, rows, w, vec![0.0; rows]).unwrap()
    }

    #[test]
    fn commitment_zero_and_uniform_difference() {
        let z = FeatureMap::from_fn(2, 2, 3, |p, c| (p + c) as f64).unwrap();
        assert_eq!(commitment_loss(&z, &z, 0.05).unwrap(), 0.0);
        let shifted = FeatureMap::from_fn(2, 2, 3, |p, c| (p + c) as f64 + 2.0).unwrap();
        assert!((commitment_loss(&z, &shifted, 0.05).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn commitment_matches_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = FeatureMap::from_fn(3, 4, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let b = FeatureMap::from_fn(3, 4, 4, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            acc += (x - y) * (x - y);
        }
        let want = 0.05 * acc / 48.0;
        let got = commitment_loss(&a, &b, 0.05).unwrap();
        assert!(((got - want) / want).abs() < 1e-12);
    }

    #[test]
    fn commitment_shape_mismatch() {
        let a = FeatureMap::zeros(2, 2, 3);
        let b = FeatureMap::zeros(2, 2, 4);
        assert!(commitment_loss(&a, &b, 1.0).is_err());
    }

    #[test]
    fn orthonormal_rows_have_zero_loss_and_gradient() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let w = weights(2, 3, vec![s, s, 0.0, -s, s, 0.0]);
        assert!(ortho_loss(&w, 1.0).abs() < 1e-15);
        assert!(ortho_loss_gradient(&w, 1.0).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn scaled_identity() {
        let c_r = 5;
        let mut w = vec![0.0; c_r * c_r];
        for i in 0..c_r {
            w[i * c_r + i] = 2.0;
        }
        let lambda = 1e-4;
        let loss = ortho_loss(&weights(c_r, c_r, w), lambda);
        assert!((loss - 9.0 * c_r as f64 * lambda).abs() < 1e-15);
    }

    #[test]
    fn scalar_gradient() {
        let lambda = 0.5;
        let g = ortho_loss_gradient(&weights(1, 1, vec![2.0]), lambda);
        assert!((g[0] - 24.0 * lambda).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rows, cols) = (4, 7);
        let m: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut want = 0.0;
        for i in 0..rows {
            for j in 0..rows {
                let mut dot = 0.0;
                for k in 0..cols {
                    dot += m[i * cols + k] * m[j * cols + k];
                }
                let d = dot - if i == j { 1.0 } else { 0.0 };
                want += d * d;
            }
        }
        let got = ortho_loss(&weights(rows, cols, m), 1e-4);
        assert!(((got - 1e-4 * want) / (1e-4 * want)).abs() < 1e-12);
    }
}

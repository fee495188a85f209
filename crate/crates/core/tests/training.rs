//! End-to-end training properties on small corpora.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rvqcomm::codec::{Codebook, CodecConfig, CodecModel};
use rvqcomm::datagen::{background_fraction, generate_scene, SceneSpec, SyntheticCorpus};
use rvqcomm::sim::median;
use rvqcomm::tensor::FeatureMap;
use rvqcomm::trainer::{ema_update, fit, ortho_loss, Corpus, TrainingConfig};

/// Least mean squared error of any affine map through a `rank`-dimensional
/// bottleneck: the discarded eigenvalues of the pixel covariance, per value.
fn linear_bottleneck_floor(maps: &[FeatureMap], rank: usize) -> f64 {
    let c = maps[0].channels();
    let rows: Vec<&[f64]> = maps.iter().flat_map(|m| m.pixels()).collect();
    let n = rows.len();
    let x = DMatrix::from_fn(n, c, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig[rank..].iter().sum::<f64>() / c as f64
}

#[test]
fn identical_maps_reach_the_linear_bottleneck_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // Six distinct non-negative pixel vectors in eight channels.
    let vectors: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..8).map(|_| rng.random_range(0.0..2.0)).collect())
        .collect();
    let map = FeatureMap::from_fn(6, 6, 8, |p, c| vectors[p % 6][c]).unwrap();
    let corpus = vec![map.clone(); 8];
    let cfg = CodecConfig {
        channels: 8,
        reduction_ratio: 2,
        stages: 2,
        codebook_size: 8,
        groups: 2,
        ..CodecConfig::default()
    };
    let train = TrainingConfig {
        epochs: 1000,
        learning_rate: 1e-2,
        batch_size: 4,
        ..TrainingConfig::default()
    };
    let floor = linear_bottleneck_floor(&corpus, cfg.reduced_channels());
    // A post-affine unit that goes negative on every pixel stops learning and
    // the run settles at a lower-rank floor, so take the best of a few inits.
    let recon: Vec<f64> = (0..4u64)
        .map(|seed| {
            let (model, _) = fit(&CodecModel::new(cfg, seed).unwrap(), &corpus, &train).unwrap();
            model.reconstruct(&map).unwrap().mse(&map).unwrap()
        })
        .collect();
    let best = recon.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        best <= floor + 2e-4,
        "recon per seed {recon:?} vs floor {floor}"
    );
}

/// Streams points whose cluster centers drift over time and returns the
/// mean squared distance of each point to its nearest entry just before
/// that entry is updated.
fn drifting_stream_mse(alpha: f64) -> f64 {
    let (k, dim, steps) = (4, 3, 20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let start: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..dim)
                .map(|d| {
                    if d == j % dim {
                        5.0 * (j + 1) as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let velocity: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-1e-4..1e-4)).collect())
        .collect();
    let mut cb = Codebook::new(0, k, dim, start.concat()).unwrap();
    let mut total = 0.0;
    for t in 0..steps {
        let j = rng.random_range(0..k);
        let x: Vec<f64> = (0..dim)
            .map(|d| start[j][d] + velocity[j][d] * t as f64 + noise.sample(&mut rng))
            .collect();
        let (near, d2) = cb.nearest(&x);
        total += d2;
        ema_update(&mut cb, near, &x, alpha).unwrap();
    }
    total / steps as f64
}

#[test]
fn lower_alpha_tracks_drift_with_less_error() {
    let mse_08 = drifting_stream_mse(0.8);
    let mse_099 = drifting_stream_mse(0.99);
    assert!(
        mse_08 < mse_099,
        "alpha 0.8: {mse_08}, alpha 0.99: {mse_099}"
    );
}

fn small_scene() -> SceneSpec {
    SceneSpec {
        height: 64,
        width: 64,
        channels: 64,
        n_blobs: 4,
        blob_scale: 4.0,
        ..SceneSpec::default()
    }
}

fn small_codec(k: usize) -> CodecConfig {
    CodecConfig {
        channels: 64,
        reduction_ratio: 8,
        codebook_size: k,
        ..CodecConfig::default()
    }
}

#[test]
fn ortho_loss_decreases_during_fit() {
    let corpus = SyntheticCorpus::range(small_scene(), 0, 16).unwrap();
    let model = CodecModel::new(small_codec(16), 2).unwrap();
    let cfg = TrainingConfig {
        epochs: 4,
        ..TrainingConfig::default()
    };
    let before = ortho_loss(model.reduce_proj(), cfg.lambda_ortho);
    let (trained, _) = fit(&model, &corpus, &cfg).unwrap();
    let after = ortho_loss(trained.reduce_proj(), cfg.lambda_ortho);
    assert!(after < before, "ortho loss {before} -> {after}");
}

#[test]
fn residual_energy_strictly_decreases_across_stages() {
    let corpus = SyntheticCorpus::range(small_scene(), 0, 40).unwrap();
    let cfg = TrainingConfig {
        epochs: 5,
        ..TrainingConfig::default()
    };
    let (model, _) = fit(&CodecModel::new(small_codec(16), 0).unwrap(), &corpus, &cfg).unwrap();
    let held_out = SyntheticCorpus::range(small_scene(), 5_000, 50).unwrap();
    let mut per_stage = vec![Vec::new(); 3];
    for i in 0..held_out.len() {
        let q = model.quantize(&held_out.get(i).unwrap()).unwrap();
        for (s, e) in q.residual_energy.iter().enumerate() {
            per_stage[s].push(*e);
        }
    }
    let medians: Vec<f64> = per_stage.iter().map(|v| median(v).unwrap()).collect();
    assert!(
        medians.windows(2).all(|w| w[1] < w[0]),
        "median residual energy per stage: {medians:?}"
    );
}

#[test]
fn generated_background_fraction_matches_target() {
    let spec = SceneSpec::default();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let map = generate_scene(&spec.with_seed(seed)).unwrap();
        worst = worst.max((background_fraction(&map) - spec.background_fraction).abs());
    }
    assert!(worst <= 0.02, "worst deviation from 0.97: {worst}");
}

//! Acceptance suite: one test per criterion, named `criterion_NN_*`, so the
//! test runner prints one pass/fail line each. Tolerances are pinned below.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rvqcomm::codec::{
    bits_per_pixel, compression_ratio, quantize, usage_histogram, Codebook, CodebookStack,
    CodecConfig, CodecModel, IndexMap, STANDARD_CODEBOOK_SIZES, TELESCOPE_TOLERANCE,
};
use rvqcomm::datagen::{SceneSpec, SyntheticCorpus};
use rvqcomm::sim::{
    median, run_round, AgentRole, AgentSpec, BudgetConfig, FeatureSource, LinkSpec, SimWorld,
};
use rvqcomm::tensor::FeatureMap;
use rvqcomm::trainer::{
    ema_codebook_fit, ema_update, fit, kmeans_reference, loss_and_gradients, ortho_loss,
    ortho_loss_gradient, parameter_vector, quantization_mse, set_parameter_vector, surrogate_loss,
    Corpus, TrainingConfig,
};
use rvqcomm::wire::{pack, unpack_with_hash, Payload};

const RATE_BPP: [u64; 5] = [6, 12, 18, 24, 30];
const RATE_RATIO: [u64; 5] = [1365, 683, 455, 341, 273];
const WIRE_TRIALS: usize = 10_000;
const ORACLE_MIN_PIXELS: usize = 100_000;
const EMA_VS_LLOYD_MAX_RATIO: f64 = 1.5;
const EMA_PASSES: usize = 5;
const LLOYD_ITERS: usize = 50;
const RD_SCENES: usize = 100;
const RD_HELD_OUT: usize = 20;
const RD_EPOCHS: usize = 5;
const RD_BUDGET: Duration = Duration::from_secs(30 * 60);
const TOP_SHARE_MIN: f64 = 0.90;
const FD_MAX_REL_ERROR: f64 = 1e-4;
const FD_TRIALS: usize = 20;
const EMA_RECURRENCE_TOL: f64 = 1e-10;
const SIM_TOTAL_BITS: u64 = 589_824;

/// Prints straight to stderr so the line shows without `--nocapture`.
fn report(n: u32, pass: bool, detail: impl std::fmt::Display) {
    let line = format!(
        "criterion {n}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn verdict(n: u32, pass: bool, detail: impl std::fmt::Display) {
    report(n, pass, &detail);
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_01_rate_table() {
    let mut bpp = Vec::new();
    let mut ratio = Vec::new();
    for k in STANDARD_CODEBOOK_SIZES {
        let cfg = CodecConfig::default().with_codebook_size(k).with_stages(3);
        assert_eq!(cfg.channels, 256);
        bpp.push(bits_per_pixel(&cfg).unwrap());
        ratio.push(compression_ratio(&cfg).unwrap().round() as u64);
    }
    verdict(
        1,
        bpp == RATE_BPP && ratio == RATE_RATIO,
        format!("bpp {bpp:?}, ratio {ratio:?}"),
    );
}

#[test]
fn criterion_02_wire_roundtrip_and_golden() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for t in 0..WIRE_TRIALS {
        let k = 1usize << rng.random_range(1..=16u32);
        let (h, w, n_q) = (
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(1..=4),
        );
        let idx: Vec<u16> = (0..h * w * n_q)
            .map(|_| rng.random_range(0..k) as u16)
            .collect();
        let map = IndexMap::new(h, w, n_q, k, idx).unwrap();
        let hash: u64 = rng.random();
        let bytes = pack(&map, hash, t as u32, (t % 65536) as u16)
            .unwrap()
            .to_bytes();
        let back = unpack_with_hash(&Payload::from_bytes(&bytes).unwrap(), hash).unwrap();
        if back != map || back.indices() != map.indices() {
            failures += 1;
        }
    }
    let mut golden_ok = true;
    for (name, h, w, n_q, k) in common::PAYLOAD_FIXTURES {
        let want = fs::read(common::golden_dir().join(name)).unwrap();
        golden_ok &= common::golden_payload(h, w, n_q, k).to_bytes() == want;
    }
    verdict(
        2,
        failures == 0 && golden_ok,
        format!("{failures} of {WIRE_TRIALS} round trips differ, golden payloads identical: {golden_ok}"),
    );
}

fn random_stack(rng: &mut ChaCha8Rng, n_q: usize, k: usize, dim: usize) -> CodebookStack {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let stages = (0..n_q)
        .map(|s| {
            let scale = 0.5f64.powi(s as i32);
            let e = (0..k * dim).map(|_| scale * normal.sample(rng)).collect();
            Codebook::new(s, k, dim, e).unwrap()
        })
        .collect();
    CodebookStack::new(stages).unwrap()
}

/// Exhaustive nearest entry, lowest index on ties.
fn oracle_nearest(cb: &Codebook, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..cb.size() {
        let d: f64 = cb
            .entry(k)
            .iter()
            .zip(x)
            .map(|(e, v)| (e - v) * (e - v))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

#[test]
fn criterion_03_quantizer_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut pixels, mut mismatches) = (0usize, 0usize);
    let configs = [
        (1, 2, 1),
        (2, 4, 3),
        (3, 16, 8),
        (3, 64, 16),
        (2, 256, 16),
        (1, 1024, 16),
        (3, 1024, 4),
    ];
    while pixels < ORACLE_MIN_PIXELS {
        for &(n_q, k, dim) in &configs {
            let stack = random_stack(&mut rng, n_q, k, dim);
            let (h, w) = (40, 40);
            let data = (0..h * w * dim).map(|_| normal.sample(&mut rng)).collect();
            let fr = FeatureMap::new(h, w, dim, data).unwrap();
            let q = quantize(&stack, &fr).unwrap();
            for p in 0..fr.num_pixels() {
                let mut r = fr.pixel(p).to_vec();
                for s in 0..n_q {
                    let want = oracle_nearest(stack.stage(s), &r);
                    if q.indices.index(p, s) as usize != want {
                        mismatches += 1;
                    }
                    for (rv, e) in r.iter_mut().zip(stack.stage(s).entry(want)) {
                        *rv -= e;
                    }
                }
            }
            pixels += fr.num_pixels();
        }
    }
    verdict(
        3,
        mismatches == 0,
        format!("{mismatches} mismatched assignments over {pixels} pixels"),
    );
}

#[test]
fn criterion_04_telescoping_identity() {
    // Every quantize call in a test build also checks the identity itself.
    let in_quantizer = cfg!(debug_assertions);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(0.0, 3.0).unwrap();
    let mut worst: f64 = 0.0;
    for (n_q, k, dim) in [(1, 4, 2), (3, 64, 16), (4, 1024, 8)] {
        let stack = random_stack(&mut rng, n_q, k, dim);
        let data = (0..32 * 32 * dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let fr = FeatureMap::new(32, 32, dim, data).unwrap();
        let q = quantize(&stack, &fr).unwrap();
        for ((x, z), r) in fr
            .data()
            .iter()
            .zip(q.quantized.data())
            .zip(q.residual.data())
        {
            worst = worst.max((z + r - x).abs());
        }
    }
    verdict(
        4,
        in_quantizer && worst <= TELESCOPE_TOLERANCE,
        format!(
            "worst |Σq + r − F_r| = {worst:e}, checked inside every quantize call: {in_quantizer}"
        ),
    );
}

/// Well-separated isotropic Gaussians, one per code.
fn gaussian_mixture(rng: &mut ChaCha8Rng, k: usize, dim: usize, per: usize) -> Vec<f64> {
    // Rejection-sample centers at least 6 apart so clusters do not overlap.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centers.len() < k {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let d2 = |o: &Vec<f64>| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        if centers.iter().all(|o| d2(o) >= 36.0) {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut points = Vec::with_capacity(k * per * dim);
    for i in 0..k * per {
        points.extend(centers[i % k].iter().map(|c| c + noise.sample(rng)));
    }
    points
}

fn ema_over_lloyd(alpha: f64) -> Vec<f64> {
    let (k, dim) = (16, 4);
    (0..5u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let points = gaussian_mixture(&mut rng, k, dim, 200);
            let lloyd = kmeans_reference(
                &points,
                dim,
                k,
                LLOYD_ITERS,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            let ema = ema_codebook_fit(
                &points,
                dim,
                k,
                alpha,
                EMA_PASSES,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            quantization_mse(&ema, dim, &points) / quantization_mse(&lloyd, dim, &points)
        })
        .collect()
}

#[test]
fn criterion_05_ema_close_to_lloyd() {
    let alpha = TrainingConfig::default().ema_alpha;
    let ratio = median(&ema_over_lloyd(alpha)).unwrap();
    verdict(
        5,
        ratio <= EMA_VS_LLOYD_MAX_RATIO,
        format!("median EMA/Lloyd MSE ratio {ratio:.4} at alpha {alpha}"),
    );
}

fn scene_spec() -> SceneSpec {
    SceneSpec::default()
}

/// Stage-0 code shares pooled over `maps`.
fn stage0_shares(model: &CodecModel, maps: &dyn Corpus) -> Vec<f64> {
    let mut share = vec![0.0; model.config().codebook_size];
    for i in 0..maps.len() {
        let idx = model.encode(&maps.get(i).unwrap()).unwrap();
        for (s, h) in share
            .iter_mut()
            .zip(usage_histogram(model.codebooks(), &idx, 0).unwrap())
        {
            *s += h / maps.len() as f64;
        }
    }
    share
}

/// Criteria 6 and 7 share the trained models.
#[test]
fn criterion_06_07_rate_distortion_and_usage() {
    let start = Instant::now();
    let train = SyntheticCorpus::range(scene_spec(), 0, RD_SCENES).unwrap();
    let held_out = SyntheticCorpus::range(scene_spec(), 10_000, RD_HELD_OUT).unwrap();
    let maps: Vec<FeatureMap> = (0..held_out.len())
        .map(|i| held_out.get(i).unwrap().into_owned())
        .collect();
    let cfg = TrainingConfig {
        epochs: RD_EPOCHS,
        ..TrainingConfig::default()
    };
    let mut medians = Vec::new();
    let mut top_share = 0.0;
    for k in [4, 16, 64] {
        let model = CodecModel::new(CodecConfig::default().with_codebook_size(k), 0).unwrap();
        let (model, _) = fit(&model, &train, &cfg).unwrap();
        let mses: Vec<f64> = maps
            .iter()
            .map(|f| model.reconstruct(f).unwrap().mse(f).unwrap())
            .collect();
        medians.push(median(&mses).unwrap());
        if k == 4 {
            top_share = stage0_shares(&model, &held_out)
                .into_iter()
                .fold(0.0, f64::max);
        }
        println!(
            "K={k}: median held-out MSE {:.6} after {:.0?}",
            medians.last().unwrap(),
            start.elapsed()
        );
    }
    let elapsed = start.elapsed();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let in_time = elapsed < RD_BUDGET;
    let top_ok = top_share >= TOP_SHARE_MIN;
    report(
        7,
        top_ok,
        format!("top stage-0 code share {top_share:.4} for K=4"),
    );
    verdict(
        6,
        monotone && in_time,
        format!("median MSE for K=4,16,64: {medians:?} in {elapsed:.0?}"),
    );
    assert!(top_ok, "criterion 7 failed: top share {top_share}");
}

#[test]
fn criterion_08_gradients_match_finite_differences() {
    let cfg = CodecConfig {
        channels: 8,
        reduction_ratio: 2,
        stages: 2,
        codebook_size: 4,
        groups: 2,
        ..CodecConfig::default()
    };
    let (beta, lambda, h) = (0.05, 1e-4, 1e-6);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
    let mut worst: f64 = 0.0;
    for trial in 0..FD_TRIALS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + trial);
        let model = CodecModel::new(cfg, trial).unwrap();
        let f = FeatureMap::from_fn(3, 4, 8, |_, _| rng.random_range(-1.0..1.0)).unwrap();

        // Orthogonality penalty on its own.
        let w = model.reduce_proj();
        let g = ortho_loss_gradient(w, 1.0);
        for i in 0..w.weights().len() {
            let shifted = |d: f64| {
                let mut m = model.clone();
                let mut p = parameter_vector(&m);
                p[i] += d;
                set_parameter_vector(&mut m, &p).unwrap();
                ortho_loss(m.reduce_proj(), 1.0)
            };
            worst = worst.max(rel(g[i], (shifted(h) - shifted(-h)) / (2.0 * h)));
        }

        // Full objective through the straight-through quantizer.
        let zq = model.quantize(&f).unwrap().quantized;
        let fr = model.reduce(&f).unwrap();
        let (_, grads) = loss_and_gradients(&model, &f, &zq, beta, lambda).unwrap();
        let analytic = grads.flatten();
        let base = parameter_vector(&model);
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut m = model.clone();
                let mut p = base.clone();
                p[i] += d;
                set_parameter_vector(&mut m, &p).unwrap();
                surrogate_loss(&m, &f, &zq, &fr, beta, lambda)
                    .unwrap()
                    .total()
            };
            worst = worst.max(rel(analytic[i], (eval(h) - eval(-h)) / (2.0 * h)));
        }
    }
    verdict(
        8,
        worst < FD_MAX_REL_ERROR,
        format!("worst relative error {worst:e} over {FD_TRIALS} trials"),
    );
}

fn two_agent_world(budget: u64) -> SimWorld {
    let mut model = CodecModel::new(CodecConfig::default().with_codebook_size(64), 9).unwrap();
    model.freeze();
    let codec = Arc::new(model);
    let agents = [
        (0, AgentRole::Vehicle, 1),
        (1, AgentRole::Infrastructure, 2),
    ]
    .map(|(agent_id, role, seed)| AgentSpec {
        agent_id,
        role,
        codec: Arc::clone(&codec),
        source: FeatureSource::Generator(scene_spec().with_seed(seed)),
    })
    .to_vec();
    let links = vec![LinkSpec::ideal(0, 1), LinkSpec::ideal(1, 0)];
    let budget = BudgetConfig::from_links(budget, &links);
    SimWorld::new(agents, links, budget, 17).unwrap()
}

#[test]
fn criterion_09_simulator_accounting() {
    let exact = run_round(&two_agent_world(SIM_TOTAL_BITS), 0).unwrap();
    let under = run_round(&two_agent_world(SIM_TOTAL_BITS - 1), 0).unwrap();
    let again = run_round(&two_agent_world(SIM_TOTAL_BITS), 0).unwrap();
    let bits_ok = exact.total_bits == SIM_TOTAL_BITS;
    let verdicts_ok = exact.budget_satisfied && !under.budget_satisfied;
    let deterministic = exact == again;
    verdict(
        9,
        bits_ok && verdicts_ok && deterministic,
        format!(
            "{} total bits, within {} bits: {}, within {} bits: {}, repeat identical: {deterministic}",
            exact.total_bits,
            SIM_TOTAL_BITS,
            exact.budget_satisfied,
            SIM_TOTAL_BITS - 1,
            under.budget_satisfied
        ),
    );
}

#[test]
fn criterion_10_ema_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dim = 6;
    let r: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let e0: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dist = |e: &[f64]| {
        e.iter()
            .zip(&r)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let d0 = dist(&e0);
    let mut worst: f64 = 0.0;
    let mut alphas = BTreeSet::new();
    for alpha in [0.2, 0.8, 0.99] {
        let mut entries = e0.clone();
        entries.extend(std::iter::repeat_n(0.0, dim));
        let mut cb = Codebook::new(0, 2, dim, entries).unwrap();
        for t in 1..=100 {
            ema_update(&mut cb, 0, &r, alpha).unwrap();
            worst = worst.max((dist(cb.entry(0)) - (1.0 - alpha).powi(t) * d0).abs());
        }
        alphas.insert(alpha.to_string());
    }
    verdict(
        10,
        worst < EMA_RECURRENCE_TOL,
        format!("worst deviation {worst:e} for alpha in {alphas:?}, t up to 100"),
    );
}

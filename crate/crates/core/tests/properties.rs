//! Property tests over random inputs.

mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvqcomm::codec::{usage_histogram, Codebook, CodecConfig, CodecModel, IndexMap};
use rvqcomm::sim::{
    fuse, run_round, AgentRole, AgentSpec, BudgetConfig, FeatureSource, LinkSpec, SimWorld,
};
use rvqcomm::tensor::{apply_projection, relu, FeatureMap};
use rvqcomm::wire::{pack, payload_size_bits, unpack_with_hash, Payload, PAYLOAD_HEADER_LEN};

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _| rng.random_range(-2.0..2.0)).unwrap()
}

fn frozen_model(seed: u64, k: usize) -> CodecModel {
    let cfg = CodecConfig {
        codebook_size: k,
        ..common::small_config()
    };
    let mut m = CodecModel::new(cfg, seed).unwrap();
    m.freeze();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_is_permutation_equivariant(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = frozen_model(seed, 8);
        let f = random_map(&mut rng, h, w, 8);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let direct = model.encode(&f.permute_pixels(&perm).unwrap()).unwrap();
        let permuted = model.encode(&f).unwrap().permute_pixels(&perm).unwrap();
        prop_assert_eq!(direct, permuted);
    }

    #[test]
    fn projection_commutes_with_permutation(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = frozen_model(seed, 4);
        let f = random_map(&mut rng, 1, n, 8);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = apply_projection(&f.permute_pixels(&perm).unwrap(), model.reduce_proj()).unwrap();
        let b = apply_projection(&f, model.reduce_proj()).unwrap().permute_pixels(&perm).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn relu_is_idempotent(seed in any::<u64>()) {
        let f = random_map(&mut ChaCha8Rng::seed_from_u64(seed), 3, 4, 5);
        prop_assert_eq!(relu(&relu(&f)), relu(&f));
    }

    #[test]
    fn pack_unpack_roundtrip(
        seed in any::<u64>(),
        log2_k in 1u32..=16,
        h in 1usize..20,
        w in 1usize..20,
        n_q in 1usize..5,
    ) {
        let k = 1usize << log2_k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<u16> = (0..h * w * n_q).map(|_| rng.random_range(0..k) as u16).collect();
        let map = IndexMap::new(h, w, n_q, k, idx).unwrap();
        let p = pack(&map, seed, 3, 9).unwrap();
        let bytes = p.to_bytes();
        let bits = payload_size_bits(h, w, n_q, k).unwrap();
        let stream_bytes = (bytes.len() - PAYLOAD_HEADER_LEN) as u64;
        prop_assert!(8 * stream_bytes >= bits && 8 * stream_bytes - bits < 8);
        let back = unpack_with_hash(&Payload::from_bytes(&bytes).unwrap(), seed).unwrap();
        prop_assert_eq!(back, map);
    }

    #[test]
    fn histogram_sums_to_one(seed in any::<u64>(), stage in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = frozen_model(seed, 16);
        let idx = model.encode(&random_map(&mut rng, 5, 7, 8)).unwrap();
        let hist = usage_histogram(model.codebooks(), &idx, stage).unwrap();
        prop_assert!((hist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn codebook_nearest_matches_oracle(seed in any::<u64>(), log2_k in 1u32..=10, dim in 1usize..17) {
        let k = 1usize << log2_k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(0, k, dim, entries).unwrap();
        for _ in 0..16 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let dists: Vec<f64> = (0..k)
                .map(|j| cb.entry(j).iter().zip(&x).map(|(e, v)| (e - v) * (e - v)).sum())
                .collect();
            let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let want = dists.iter().position(|&d| d == best).unwrap();
            prop_assert_eq!(cb.nearest(&x).0, want);
        }
    }

    #[test]
    fn max_fusion_ignores_remote_order(seed in any::<u64>(), n in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let local = random_map(&mut rng, 2, 3, 4);
        let mut remotes: Vec<FeatureMap> = (0..n).map(|_| random_map(&mut rng, 2, 3, 4)).collect();
        let once = fuse(&local, &remotes).unwrap();
        remotes.shuffle(&mut rng);
        prop_assert_eq!(&fuse(&local, &remotes).unwrap(), &once);
        // Fusing in two steps equals fusing everything at once.
        let (head, tail) = remotes.split_at(n / 2);
        let staged = fuse(&fuse(&local, head).unwrap(), tail).unwrap();
        prop_assert_eq!(staged, once);
    }
}

fn lossy_world(seed: u64, loss: f64) -> SimWorld {
    let codec = Arc::new(frozen_model(1, 4));
    let maps = Arc::new(
        (0..4u64)
            .map(|s| random_map(&mut ChaCha8Rng::seed_from_u64(s), 6, 6, 8))
            .collect::<Vec<_>>(),
    );
    let agents = (0..3)
        .map(|agent_id| AgentSpec {
            agent_id,
            role: AgentRole::Vehicle,
            codec: Arc::clone(&codec),
            source: FeatureSource::Maps(Arc::clone(&maps)),
        })
        .collect();
    let mut links = Vec::new();
    for from in 0..3 {
        for to in 0..3 {
            if from != to {
                links.push(LinkSpec {
                    from,
                    to,
                    rate: 1000.0 + from as f64,
                    latency: 0.001 * to as f64,
                    loss_probability: loss,
                });
            }
        }
    }
    let budget = BudgetConfig::from_links(1000, &links);
    SimWorld::new(agents, links, budget, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rounds_are_deterministic(seed in any::<u64>(), loss in 0.0f64..1.0, frame in 0u32..100) {
        let a = run_round(&lossy_world(seed, loss), frame).unwrap();
        let b = run_round(&lossy_world(seed, loss), frame).unwrap();
        // 36 pixels · 2 stages · 2 bits = 144 bits = 18 bytes per payload.
        prop_assert_eq!(a.total_bits, 6 * 144);
        prop_assert_eq!(a.budget_satisfied, a.total_bits <= 1000);
        prop_assert_eq!(a.links_csv(), b.links_csv());
        prop_assert_eq!(a, b);
    }
}

//! Deterministic inputs behind the golden fixtures in `tests/golden/`.
//!
//! Set `RVQCOMM_REGENERATE_GOLDEN=1` and run `cargo test -p rvqcomm --test golden`
//! to rewrite the fixtures after an intentional format change.

#![allow(dead_code)]

use std::path::PathBuf;

use rvqcomm::codec::{CodecConfig, CodecModel, IndexMap};
use rvqcomm::tensor::FeatureMap;
use rvqcomm::wire::{pack, Payload};

pub const GOLDEN_HASH: u64 = 0x0123_4567_89ab_cdef;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn regenerate() -> bool {
    std::env::var_os("RVQCOMM_REGENERATE_GOLDEN").is_some_and(|v| v == "1")
}

/// `(file name, height, width, stages, K)` of each payload fixture.
pub const PAYLOAD_FIXTURES: [(&str, usize, usize, usize, usize); 3] = [
    ("payload_k4_nq2_3x5.rvqp", 3, 5, 2, 4),
    ("payload_k64_nq3_8x6.rvqp", 8, 6, 3, 64),
    ("payload_k1024_nq3_2x3.rvqp", 2, 3, 3, 1024),
];

pub fn golden_indices(h: usize, w: usize, n_q: usize, k: usize) -> IndexMap {
    let idx = (0..h * w * n_q)
        .map(|i| ((i * 7919 + 13) % k) as u16)
        .collect();
    IndexMap::new(h, w, n_q, k, idx).unwrap()
}

pub fn golden_payload(h: usize, w: usize, n_q: usize, k: usize) -> Payload {
    pack(&golden_indices(h, w, n_q, k), GOLDEN_HASH, 42, 7).unwrap()
}

pub fn golden_tensor() -> FeatureMap {
    FeatureMap::from_fn(2, 3, 4, |p, c| (p as f64 - 2.5) * 0.75 + c as f64 * 0.125).unwrap()
}

pub fn small_config() -> CodecConfig {
    CodecConfig {
        channels: 8,
        reduction_ratio: 2,
        stages: 2,
        codebook_size: 4,
        ema_alpha: 0.8,
        groups: 2,
        post_affine_bias: true,
    }
}

pub fn golden_model() -> CodecModel {
    let mut m = CodecModel::new(small_config(), 3).unwrap();
    m.freeze();
    m
}

//! Index-only feature messaging for collaborative perception.
//!
//! A sender reduces its `H × W × C` feature map to `C_r` channels with a 1×1
//! projection and group normalization, then encodes every pixel with `n_q`
//! stages of residual vector quantization. Only the per-pixel code indices
//! are transmitted, `n_q · log₂ K` bits per pixel. The receiver holds the same
//! codebooks, sums the selected entries and expands them back to `C`
//! channels before fusing with its own features.
//!
//! Modules:
//! - [`tensor`]: feature maps, 1×1 projections, group norm, ReLU, `RVQT` files
//! - [`codec`]: codec configuration, codebooks, quantizer and model
//! - [`trainer`]: EMA codebook learning and gradient fitting of the projections
//! - [`wire`]: payload and codebook bundle formats
//! - [`sim`]: budgeted multi-agent exchange rounds and rate/distortion sweeps
//! - [`datagen`]: synthetic sparse BEV-like scenes and corpus manifests

pub mod codec;
pub mod datagen;
pub mod error;
pub mod sim;
pub mod tensor;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};

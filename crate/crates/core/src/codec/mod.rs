//! The feature codec: channel reduction, residual vector quantization and the
//! receiver-side reconstruction path.

mod codebook;
mod config;
mod model;
mod quantize;

pub use codebook::{Codebook, CodebookStack};
pub use config::{
    bits_per_pixel, compression_ratio, compression_ratio_rounded, log2_codebook_size, CodecConfig,
    RAW_BITS_PER_VALUE, STANDARD_CODEBOOK_SIZES,
};
pub use model::{CodecModel, DecoderTrace};
pub use quantize::{
    lookup_accumulate, quantize, quantize_with_hook, usage_histogram, IndexMap, Quantization,
    TrainingHook, TELESCOPE_TOLERANCE,
};

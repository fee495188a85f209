//! Codebook bundles: every parameter an agent needs to encode and decode,
//! distributed ahead of time so only indices travel at runtime.
//!
//! Header (little-endian, 21 bytes): magic `RVQC`, u8 version, u16 C,
//! u16 C_r, u8 n_q, u16 K, u8 groups, u64 FNV-1a hash of the parameter
//! block. The parameter block follows as `f32` values in this order:
//!
//! 1. reduce projection weights (`C_r × C`, row-major), bias (`C_r`)
//! 2. reduce group norm gain (`C_r`), shift (`C_r`), epsilon (1)
//! 3. post-affine weights (`C_r × C_r`), bias (`C_r`)
//! 4. expand group norm gain (`C_r`), shift (`C_r`), epsilon (1)
//! 5. expand projection weights (`C × C_r`), bias (`C`)
//! 6. codebooks, stage by stage, `K × C_r` each

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::codec::{Codebook, CodebookStack, CodecConfig, CodecModel};
use crate::error::{Error, Result};
use crate::tensor::{GroupNormParams, ProjectionWeights};

pub const BUNDLE_MAGIC: [u8; 4] = *b"RVQC";
pub const BUNDLE_VERSION: u8 = 1;
pub const BUNDLE_HEADER_LEN: usize = 21;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Shape fields stored in the bundle header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BundleShape {
    pub channels: usize,
    pub reduced: usize,
    pub stages: usize,
    pub codebook_size: usize,
    pub groups: usize,
}

impl BundleShape {
    pub(crate) fn of(model: &CodecModel) -> Self {
        let cfg = model.config();
        Self {
            channels: cfg.channels,
            reduced: cfg.reduced_channels(),
            stages: cfg.stages,
            codebook_size: cfg.codebook_size,
            groups: cfg.groups,
        }
    }

    /// Number of parameter values in the block.
    pub(crate) fn value_count(&self) -> usize {
        let (c, c_r) = (self.channels, self.reduced);
        (c_r * c + c_r)
            + 2 * (2 * c_r + 1)
            + (c_r * c_r + c_r)
            + (c * c_r + c)
            + self.stages * self.codebook_size * c_r
    }
}

/// Every parameter in bundle order, at full precision.
pub(crate) fn model_values(model: &CodecModel) -> Vec<f64> {
    let mut out = Vec::new();
    let proj = |out: &mut Vec<f64>, p: &ProjectionWeights| {
        out.extend_from_slice(p.weights());
        out.extend_from_slice(p.bias());
    };
    let norm = |out: &mut Vec<f64>, n: &GroupNormParams| {
        out.extend_from_slice(n.gain());
        out.extend_from_slice(n.shift());
        out.push(n.epsilon());
    };
    proj(&mut out, model.reduce_proj());
    norm(&mut out, model.reduce_norm());
    proj(&mut out, model.post_affine());
    norm(&mut out, model.expand_norm());
    proj(&mut out, model.expand_proj());
    for cb in model.codebooks().stages() {
        out.extend_from_slice(cb.entries());
    }
    out
}

/// Inverse of [`model_values`].
pub(crate) fn model_from_values(
    shape: BundleShape,
    values: &[f64],
    frozen: bool,
) -> Result<CodecModel> {
    let BundleShape {
        channels: c,
        reduced: c_r,
        stages: n_q,
        codebook_size: k,
        groups,
    } = shape;
    if c_r == 0 || c % c_r != 0 {
        return Err(Error::Protocol(format!(
            "C_r = {c_r} does not divide C = {c}"
        )));
    }
    if values.len() != shape.value_count() {
        return Err(Error::Shape(format!(
            "{} parameter values, shape needs {}",
            values.len(),
            shape.value_count()
        )));
    }
    let config = CodecConfig {
        channels: c,
        reduction_ratio: c / c_r,
        stages: n_q,
        codebook_size: k,
        groups,
        ..CodecConfig::default()
    };
    config
        .validate()
        .map_err(|e| Error::Protocol(e.to_string()))?;
    let mut at = 0;
    let mut take = |n: usize| {
        let v = values[at..at + n].to_vec();
        at += n;
        v
    };
    let reduce_proj = ProjectionWeights::new(c, c_r, take(c_r * c), take(c_r))?;
    let reduce_norm = GroupNormParams::new(c_r, groups, take(c_r), take(c_r), take(1)[0])?;
    let post_affine = ProjectionWeights::new(c_r, c_r, take(c_r * c_r), take(c_r))?;
    let expand_norm = GroupNormParams::new(c_r, groups, take(c_r), take(c_r), take(1)[0])?;
    let expand_proj = ProjectionWeights::new(c_r, c, take(c * c_r), take(c))?;
    let stages = (0..n_q)
        .map(|i| Codebook::new(i, k, c_r, take(k * c_r)))
        .collect::<Result<Vec<_>>>()?;
    CodecModel::from_parts(
        config,
        reduce_proj,
        reduce_norm,
        post_affine,
        expand_norm,
        expand_proj,
        CodebookStack::new(stages)?,
        frozen,
    )
}

/// Serializes a model. Parameters are narrowed to `f32`; frozen models
/// already are, so they roundtrip exactly.
pub fn encode_bundle(model: &CodecModel) -> Result<Vec<u8>> {
    let shape = BundleShape::of(model);
    if shape.codebook_size > u16::MAX as usize {
        return Err(Error::Config(format!(
            "bundle format stores K as u16; K = {} does not fit",
            shape.codebook_size
        )));
    }
    if shape.groups > u8::MAX as usize
        || shape.reduced > u16::MAX as usize
        || shape.channels > u16::MAX as usize
        || shape.stages > u8::MAX as usize
    {
        return Err(Error::Config(
            "model dimensions exceed the bundle header".into(),
        ));
    }
    let block: Vec<u8> = model_values(model)
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let mut out = Vec::with_capacity(BUNDLE_HEADER_LEN + block.len());
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.push(BUNDLE_VERSION);
    out.extend_from_slice(&(shape.channels as u16).to_le_bytes());
    out.extend_from_slice(&(shape.reduced as u16).to_le_bytes());
    out.push(shape.stages as u8);
    out.extend_from_slice(&(shape.codebook_size as u16).to_le_bytes());
    out.push(shape.groups as u8);
    out.extend_from_slice(&fnv1a64(&block).to_le_bytes());
    out.extend_from_slice(&block);
    Ok(out)
}

/// Parses and verifies the header and parameter block at the front of
/// `bytes`. Returns the shape, the values and the number of bytes consumed.
pub(crate) fn decode_bundle_values(bytes: &[u8]) -> Result<(BundleShape, Vec<f64>, usize)> {
    if bytes.len() < BUNDLE_HEADER_LEN {
        return Err(Error::Truncated {
            expected: BUNDLE_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0..4] != BUNDLE_MAGIC {
        return Err(Error::Protocol(format!(
            "bad bundle magic {:02x?}",
            &bytes[0..4]
        )));
    }
    if bytes[4] != BUNDLE_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported bundle version {}",
            bytes[4]
        )));
    }
    let u16_at = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
    let shape = BundleShape {
        channels: u16_at(5),
        reduced: u16_at(7),
        stages: bytes[9] as usize,
        codebook_size: u16_at(10),
        groups: bytes[12] as usize,
    };
    let hash = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
    let expected = BUNDLE_HEADER_LEN + 4 * shape.value_count();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let block = &bytes[BUNDLE_HEADER_LEN..expected];
    let actual_hash = fnv1a64(block);
    if actual_hash != hash {
        return Err(Error::CorruptPayload(format!(
            "bundle hash {actual_hash:#018x} does not match header {hash:#018x}"
        )));
    }
    let values = block
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((shape, values, expected))
}

/// Parses a bundle from the front of `bytes`, returning the frozen model
/// and the number of bytes consumed. `ema_alpha` is not stored and is set to
/// the default.
pub fn decode_bundle(bytes: &[u8]) -> Result<(CodecModel, usize)> {
    let (shape, values, used) = decode_bundle_values(bytes)?;
    Ok((model_from_values(shape, &values, true)?, used))
}

pub fn save_bundle(model: &CodecModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bundle(model)?).map_err(|e| Error::io(path, e))
}

/// Loads a bundle file; trailing bytes (e.g. a training-state footer) are ignored.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<CodecModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_bundle(&bytes)?.0)
}

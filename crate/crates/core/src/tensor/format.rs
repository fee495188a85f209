//! `RVQT` raw tensor files: a 16-byte header, the channel count, then
//! `H·W·C` little-endian `f32` values in pixel-major row-major order.
//! See `docs/tensor-format.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"RVQT";
pub const TENSOR_VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 16;

/// Serializes `map`. Values are narrowed to `f32`.
pub fn write_tensor<W: Write>(map: &FeatureMap, mut out: W) -> std::io::Result<()> {
    let mut header = [0u8; HEADER_LEN + 4];
    header[0..4].copy_from_slice(&TENSOR_MAGIC);
    header[4] = TENSOR_VERSION;
    header[5] = DTYPE_F32;
    // bytes 6..8 reserved, zero
    header[8..12].copy_from_slice(&(map.height() as u32).to_le_bytes());
    header[12..16].copy_from_slice(&(map.width() as u32).to_le_bytes());
    header[16..20].copy_from_slice(&(map.channels() as u32).to_le_bytes());
    out.write_all(&header)?;
    let mut body = Vec::with_capacity(map.data().len() * 4);
    for &v in map.data() {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&body)?;
    out.flush()
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    parse_tensor(&bytes)
}

fn parse_tensor(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN + 4,
            actual: bytes.len(),
        });
    }
    if bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::Protocol(format!(
            "bad tensor magic {:02x?}",
            &bytes[0..4]
        )));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported tensor version {}",
            bytes[4]
        )));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Protocol(format!("unsupported dtype {}", bytes[5])));
    }
    if bytes[6..8] != [0, 0] {
        return Err(Error::Protocol("reserved header bytes are not zero".into()));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (read_u32(8), read_u32(12), read_u32(16));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Protocol(format!("zero dimension in {h}x{w}x{c}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::Protocol(format!("dimensions {h}x{w}x{c} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN + 4..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::new(h, w, c, data)
}

pub fn save_tensor(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(map, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_tensor(&bytes)
}

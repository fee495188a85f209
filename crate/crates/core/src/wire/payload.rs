//! Index payloads: the message one agent sends to another.
//!
//! Layout (little-endian header fields, 25 bytes):
//!
//! | offset | size | field          |
//! |--------|------|----------------|
//! | 0      | 4    | magic `RVQP`   |
//! | 4      | 1    | version        |
//! | 5      | 2    | height         |
//! | 7      | 2    | width          |
//! | 9      | 1    | n_q            |
//! | 10     | 1    | log2 K         |
//! | 11     | 8    | codebook hash  |
//! | 19     | 4    | frame id       |
//! | 23     | 2    | agent id       |
//!
//! followed by `ceil(H·W·n_q·log2K / 8)` bytes of MSB-first packed indices,
//! pixel-major with stages innermost.

use super::bits::{BitReader, BitWriter};
use crate::codec::{log2_codebook_size, CodebookStack, IndexMap};
use crate::error::{Error, Result};

pub const PAYLOAD_MAGIC: [u8; 4] = *b"RVQP";
pub const PAYLOAD_VERSION: u8 = 1;
pub const PAYLOAD_HEADER_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadHeader {
    pub version: u8,
    pub height: u16,
    pub width: u16,
    pub stages: u8,
    pub log2_k: u8,
    pub codebook_hash: u64,
    pub frame_id: u32,
    pub agent_id: u16,
}

impl PayloadHeader {
    pub fn codebook_size(&self) -> usize {
        1usize << self.log2_k
    }

    pub fn bitstream_bits(&self) -> u64 {
        self.height as u64 * self.width as u64 * self.stages as u64 * self.log2_k as u64
    }

    pub fn bitstream_len(&self) -> usize {
        self.bitstream_bits().div_ceil(8) as usize
    }

    fn encode(&self) -> [u8; PAYLOAD_HEADER_LEN] {
        let mut b = [0u8; PAYLOAD_HEADER_LEN];
        b[0..4].copy_from_slice(&PAYLOAD_MAGIC);
        b[4] = self.version;
        b[5..7].copy_from_slice(&self.height.to_le_bytes());
        b[7..9].copy_from_slice(&self.width.to_le_bytes());
        b[9] = self.stages;
        b[10] = self.log2_k;
        b[11..19].copy_from_slice(&self.codebook_hash.to_le_bytes());
        b[19..23].copy_from_slice(&self.frame_id.to_le_bytes());
        b[23..25].copy_from_slice(&self.agent_id.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < PAYLOAD_HEADER_LEN {
            return Err(Error::Truncated {
                expected: PAYLOAD_HEADER_LEN,
                actual: b.len(),
            });
        }
        if b[0..4] != PAYLOAD_MAGIC {
            return Err(Error::Protocol(format!(
                "bad payload magic {:02x?}",
                &b[0..4]
            )));
        }
        let header = Self {
            version: b[4],
            height: u16::from_le_bytes([b[5], b[6]]),
            width: u16::from_le_bytes([b[7], b[8]]),
            stages: b[9],
            log2_k: b[10],
            codebook_hash: u64::from_le_bytes(b[11..19].try_into().unwrap()),
            frame_id: u32::from_le_bytes(b[19..23].try_into().unwrap()),
            agent_id: u16::from_le_bytes([b[23], b[24]]),
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<()> {
        if self.version != PAYLOAD_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported payload version {}",
                self.version
            )));
        }
        if !(1..=16).contains(&self.log2_k) {
            return Err(Error::Protocol(format!(
                "log2 K = {} outside [1, 16]",
                self.log2_k
            )));
        }
        if self.height == 0 || self.width == 0 || self.stages == 0 {
            return Err(Error::Protocol("zero dimension in payload header".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub header: PayloadHeader,
    pub bitstream: Vec<u8>,
}

/// `H · W · n_q · log₂ K`.
pub fn payload_size_bits(height: usize, width: usize, stages: usize, k: usize) -> Result<u64> {
    let log2_k = log2_codebook_size(k)? as u64;
    Ok(height as u64 * width as u64 * stages as u64 * log2_k)
}

/// Packs `idx` behind a header stamped with the sender's codebook hash.
pub fn pack(idx: &IndexMap, codebook_hash: u64, frame_id: u32, agent_id: u16) -> Result<Payload> {
    let log2_k = log2_codebook_size(idx.codebook_size())?;
    let narrow = |v: usize, what: &str, max: usize| {
        if v > max {
            Err(Error::Config(format!(
                "{what} {v} exceeds the wire limit {max}"
            )))
        } else {
            Ok(v)
        }
    };
    let header = PayloadHeader {
        version: PAYLOAD_VERSION,
        height: narrow(idx.height(), "height", u16::MAX as usize)? as u16,
        width: narrow(idx.width(), "width", u16::MAX as usize)? as u16,
        stages: narrow(idx.stages(), "stage count", u8::MAX as usize)? as u8,
        log2_k: log2_k as u8,
        codebook_hash,
        frame_id,
        agent_id,
    };
    let mut w = BitWriter::with_capacity(header.bitstream_len());
    for &k in idx.indices() {
        w.write(k as u32, log2_k);
    }
    let bitstream = w.finish();
    debug_assert_eq!(bitstream.len(), header.bitstream_len());
    Ok(Payload { header, bitstream })
}

impl Payload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PAYLOAD_HEADER_LEN + self.bitstream.len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.bitstream);
        out
    }

    /// Parses a complete payload. Length must match the header exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = PayloadHeader::decode(bytes)?;
        let expected = PAYLOAD_HEADER_LEN + header.bitstream_len();
        if bytes.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            header,
            bitstream: bytes[PAYLOAD_HEADER_LEN..].to_vec(),
        })
    }

    /// Total bytes on the wire, header included.
    pub fn wire_len(&self) -> usize {
        PAYLOAD_HEADER_LEN + self.bitstream.len()
    }

    /// Decodes the indices without consulting any codebook.
    pub fn decode_indices(&self) -> Result<IndexMap> {
        self.header.validate()?;
        let expected = self.header.bitstream_len();
        if self.bitstream.len() != expected {
            return Err(Error::Truncated {
                expected: PAYLOAD_HEADER_LEN + expected,
                actual: PAYLOAD_HEADER_LEN + self.bitstream.len(),
            });
        }
        let h = &self.header;
        let n = h.height as usize * h.width as usize * h.stages as usize;
        let width = h.log2_k as u32;
        let mut r = BitReader::new(&self.bitstream);
        let mut indices = Vec::with_capacity(n);
        for _ in 0..n {
            let v = r.read(width).ok_or(Error::Truncated {
                expected: PAYLOAD_HEADER_LEN + expected,
                actual: PAYLOAD_HEADER_LEN + self.bitstream.len(),
            })?;
            indices.push(v as u16);
        }
        if !r.rest_is_zero() {
            return Err(Error::Protocol("non-zero padding bits".into()));
        }
        IndexMap::new(
            h.height as usize,
            h.width as usize,
            h.stages as usize,
            h.codebook_size(),
            indices,
        )
    }
}

/// Decodes a payload after checking it was produced against `local_hash`.
pub fn unpack_with_hash(p: &Payload, local_hash: u64) -> Result<IndexMap> {
    if p.header.codebook_hash != local_hash {
        return Err(Error::CodebookDesync {
            remote: p.header.codebook_hash,
            local: local_hash,
        });
    }
    p.decode_indices()
}

/// Decodes a payload for the receiver holding `local` codebooks.
pub fn unpack(p: &Payload, local: &CodebookStack) -> Result<IndexMap> {
    let idx = unpack_with_hash(p, local.content_hash())?;
    if idx.stages() != local.num_stages() || idx.codebook_size() != local.codebook_size() {
        return Err(Error::CorruptPayload(format!(
            "payload is n_q={}, K={}; local codebooks are n_q={}, K={}",
            idx.stages(),
            idx.codebook_size(),
            local.num_stages(),
            local.codebook_size()
        )));
    }
    Ok(idx)
}

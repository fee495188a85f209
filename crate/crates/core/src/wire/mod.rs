//! Bit-exact serialization of everything that crosses the network: index
//! payloads and pre-shared codebook bundles. See `docs/wire-format.md`.

mod bits;
pub(crate) mod bundle;
mod payload;

pub use bits::{BitReader, BitWriter};
pub use bundle::{
    decode_bundle, encode_bundle, fnv1a64, load_bundle, save_bundle, BUNDLE_HEADER_LEN,
    BUNDLE_MAGIC, BUNDLE_VERSION,
};
pub use payload::{
    pack, payload_size_bits, unpack, unpack_with_hash, Payload, PayloadHeader, PAYLOAD_HEADER_LEN,
    PAYLOAD_MAGIC, PAYLOAD_VERSION,
};

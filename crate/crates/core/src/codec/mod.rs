//! Protocol messages and their wire encodings.
//!
//! Control messages (header, ack, category request, request notice) are
//! canonical JSON: fixed key order, no insignificant whitespace. Fragments use
//! a compact big-endian binary layout with a per-payload CRC32:
//!
//! ```text
//! magic u32 = 0x43524C59 | version u8 = 1 | hash_file [32]
//! part_index u32 | total_parts u32 | payload_len u32 | payload_crc u32
//! payload [payload_len]
//! ```

mod control;
mod fragment;
mod header;
mod ids;

pub use control::{
    decode_ack, decode_notice, decode_request, decode_sender_inbound, encode_ack, encode_notice,
    encode_request, AckKind, AckMessage, CategoryRequest, RequestNotice, SenderInbound,
};
pub use fragment::{decode_fragment, encode_fragment, Fragment, FRAGMENT_HEADER_LEN, FRAGMENT_MAGIC};
pub use header::{decode_header, encode_header, parts_for, ImageHeader};
pub use ids::{HashId, SenderId};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("payload checksum mismatch: header says {expected:#010x}, payload has {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
}

impl CodecError {
    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Self::MalformedMessage(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Self::InvariantViolation(msg.into())
    }
}

/// Syntax errors, missing keys and wrong types are all malformed messages.
pub(crate) fn json_error(err: serde_json::Error) -> CodecError {
    CodecError::malformed(err.to_string())
}

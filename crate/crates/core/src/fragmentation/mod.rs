//! Image splitting, reassembly and whole-file integrity checks.

mod assembly;

pub use assembly::{AssemblyBuffer, IngestOutcome, MissingReport, Restored};

use std::collections::BTreeMap;
use std::io;

use bytes::Bytes;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Fragment, HashId, ImageHeader, SenderId};

/// Default fragment payload size.
pub const DEFAULT_CHUNK_SIZE: u32 = 256 * 1024;

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error("image is empty")]
    EmptyInput,
    #[error("chunk size must be at least one byte")]
    ZeroChunkSize,
    #[error("assembled image hashes to {actual}, header announced {expected}")]
    HashMismatch { expected: HashId, actual: HashId },
    #[error("fragment belongs to transfer {got}, buffer assembles {expected}")]
    ForeignFragment { expected: HashId, got: HashId },
    #[error("fragment does not fit its header: {0}")]
    InvalidFragment(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("spill i/o: {0}")]
    Io(#[from] io::Error),
}

/// SHA-256 over the whole image.
pub fn compute_hash_file(image: &[u8]) -> Result<HashId, FragmentError> {
    if image.is_empty() {
        return Err(FragmentError::EmptyInput);
    }
    Ok(sha256(image))
}

pub(crate) fn sha256(data: &[u8]) -> HashId {
    HashId::from_bytes(Sha256::digest(data).into())
}

/// Everything a header needs besides what is derived from the bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferMeta {
    pub sender: SenderId,
    pub package_name: String,
    pub file_name: String,
    pub annotations: BTreeMap<String, String>,
}

/// Splits `image` into `chunk_size` fragments. Payloads are zero-copy slices
/// of `image`.
pub fn split(
    image: &Bytes,
    chunk_size: u32,
    meta: TransferMeta,
) -> Result<(ImageHeader, Vec<Fragment>), FragmentError> {
    if chunk_size == 0 {
        return Err(FragmentError::ZeroChunkSize);
    }
    let hash_file = compute_hash_file(image)?;
    let header = ImageHeader::new(
        hash_file,
        meta.sender,
        meta.package_name,
        meta.file_name,
        image.len() as u64,
        chunk_size,
        meta.annotations,
    )?;
    let chunk = chunk_size as usize;
    let fragments = (0..header.total_parts)
        .map(|index| {
            let start = index as usize * chunk;
            let end = (start + chunk).min(image.len());
            Fragment::new(hash_file, index, header.total_parts, image.slice(start..end))
        })
        .collect();
    Ok((header, fragments))
}

/// Reassembles a complete buffer, or reports what is still missing.
pub fn restore(buf: &AssemblyBuffer) -> Result<Restored, FragmentError> {
    buf.restore()
}

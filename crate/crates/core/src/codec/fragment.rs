use bytes::{BufMut, Bytes, BytesMut};

use super::{CodecError, HashId};

pub const FRAGMENT_MAGIC: u32 = 0x4352_4C59;
const FRAGMENT_VERSION: u8 = 1;

/// Size of the fixed part of an encoded fragment.
pub const FRAGMENT_HEADER_LEN: usize = 4 + 1 + HashId::LEN + 4 + 4 + 4 + 4;

/// One chunk of an image on the `hash_sender_orq` topic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub hash_file: HashId,
    pub part_index: u32,
    pub total_parts: u32,
    pub payload: Bytes,
    pub payload_crc: u32,
}

impl Fragment {
    pub fn new(hash_file: HashId, part_index: u32, total_parts: u32, payload: Bytes) -> Self {
        let payload_crc = crc32fast::hash(&payload);
        Self {
            hash_file,
            part_index,
            total_parts,
            payload,
            payload_crc,
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAGMENT_HEADER_LEN + self.payload.len()
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.total_parts == 0 {
            return Err(CodecError::invariant("total_parts must be at least 1"));
        }
        if self.part_index >= self.total_parts {
            return Err(CodecError::invariant(format!(
                "part_index {} >= total_parts {}",
                self.part_index, self.total_parts
            )));
        }
        if self.payload.is_empty() {
            return Err(CodecError::invariant("fragment payload is empty"));
        }
        Ok(())
    }
}

pub fn encode_fragment(f: &Fragment) -> Bytes {
    debug_assert!(f.validate().is_ok());
    let mut buf = BytesMut::with_capacity(f.encoded_len());
    buf.put_u32(FRAGMENT_MAGIC);
    buf.put_u8(FRAGMENT_VERSION);
    buf.put_slice(f.hash_file.as_bytes());
    buf.put_u32(f.part_index);
    buf.put_u32(f.total_parts);
    buf.put_u32(f.payload.len() as u32);
    buf.put_u32(f.payload_crc);
    buf.put_slice(&f.payload);
    buf.freeze()
}

/// Decodes and re-verifies a fragment. The payload is a zero-copy slice of
/// `buf`.
pub fn decode_fragment(buf: &Bytes) -> Result<Fragment, CodecError> {
    if buf.len() < FRAGMENT_HEADER_LEN {
        return Err(CodecError::malformed(format!(
            "fragment is {} bytes, shorter than the {FRAGMENT_HEADER_LEN}-byte header",
            buf.len()
        )));
    }
    let be_u32 = |at: usize| u32::from_be_bytes(buf[at..at + 4].try_into().unwrap());
    let magic = be_u32(0);
    if magic != FRAGMENT_MAGIC {
        return Err(CodecError::malformed(format!("bad magic {magic:#010x}")));
    }
    let version = buf[4];
    if version != FRAGMENT_VERSION {
        return Err(CodecError::malformed(format!("unsupported fragment version {version}")));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&buf[5..37]);
    let part_index = be_u32(37);
    let total_parts = be_u32(41);
    let payload_len = be_u32(45) as usize;
    let payload_crc = be_u32(49);
    if buf.len() - FRAGMENT_HEADER_LEN != payload_len {
        return Err(CodecError::malformed(format!(
            "payload_len says {payload_len} bytes, buffer carries {}",
            buf.len() - FRAGMENT_HEADER_LEN
        )));
    }
    let payload = buf.slice(FRAGMENT_HEADER_LEN..);
    let actual = crc32fast::hash(&payload);
    if actual != payload_crc {
        return Err(CodecError::ChecksumMismatch {
            expected: payload_crc,
            actual,
        });
    }
    let fragment = Fragment {
        hash_file: HashId::from_bytes(hash),
        part_index,
        total_parts,
        payload,
        payload_crc,
    };
    fragment.validate()?;
    Ok(fragment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frag(index: u32, total: u32, payload: &[u8]) -> Fragment {
        Fragment::new(
            HashId::from_bytes([3; 32]),
            index,
            total,
            Bytes::copy_from_slice(payload),
        )
    }

    #[test]
    fn single_byte_fragment_is_54_bytes() {
        assert_eq!(FRAGMENT_HEADER_LEN, 53);
        let encoded = encode_fragment(&frag(0, 1, &[0x00]));
        assert_eq!(encoded.len(), 54);
        assert_eq!(&encoded[..4], &[0x43, 0x52, 0x4C, 0x59]);
        assert_eq!(encoded[4], 1);
    }

    #[test]
    fn round_trip() {
        let f = frag(2, 5, b"hello world");
        assert_eq!(decode_fragment(&encode_fragment(&f)).unwrap(), f);
    }

    #[test]
    fn flipped_payload_bit_is_checksum_mismatch() {
        let encoded = encode_fragment(&frag(0, 1, b"payload"));
        let mut raw = encoded.to_vec();
        *raw.last_mut().unwrap() ^= 0x01;
        assert!(matches!(
            decode_fragment(&Bytes::from(raw)),
            Err(CodecError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_short_buffers_are_malformed() {
        let mut raw = encode_fragment(&frag(0, 1, b"x")).to_vec();
        raw[0] = 0;
        assert!(matches!(
            decode_fragment(&Bytes::from(raw)),
            Err(CodecError::MalformedMessage(_))
        ));
        assert!(matches!(
            decode_fragment(&Bytes::from_static(&[0x43, 0x52])),
            Err(CodecError::MalformedMessage(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut raw = encode_fragment(&frag(0, 1, b"x")).to_vec();
        raw.push(0);
        assert!(matches!(
            decode_fragment(&Bytes::from(raw)),
            Err(CodecError::MalformedMessage(_))
        ));
    }

    #[test]
    fn index_past_total_is_invariant_violation() {
        let f = Fragment {
            part_index: 4,
            ..frag(0, 4, b"abc")
        };
        let mut buf = BytesMut::new();
        buf.put_u32(FRAGMENT_MAGIC);
        buf.put_u8(1);
        buf.put_slice(f.hash_file.as_bytes());
        buf.put_u32(4);
        buf.put_u32(4);
        buf.put_u32(3);
        buf.put_u32(f.payload_crc);
        buf.put_slice(b"abc");
        assert!(matches!(
            decode_fragment(&buf.freeze()),
            Err(CodecError::InvariantViolation(_))
        ));
    }
}

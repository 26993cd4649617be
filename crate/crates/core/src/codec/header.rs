use std::collections::BTreeMap;
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::{json_error, CodecError, HashId, SenderId};

/// Metadata announced on the `send_header` topic before any fragment is sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageHeader {
    pub hash_file: HashId,
    pub sender: SenderId,
    pub package_name: String,
    pub file_name: String,
    pub file_size: u64,
    pub total_parts: u32,
    pub chunk_size: u32,
    pub annotations: BTreeMap<String, String>,
}

/// Number of fragments needed for `file_size` bytes at `chunk_size` bytes each.
pub fn parts_for(file_size: u64, chunk_size: u32) -> u64 {
    file_size.div_ceil(u64::from(chunk_size.max(1)))
}

impl ImageHeader {
    /// Builds a header, deriving `total_parts` from size and chunk size.
    pub fn new(
        hash_file: HashId,
        sender: SenderId,
        package_name: impl Into<String>,
        file_name: impl Into<String>,
        file_size: u64,
        chunk_size: u32,
        annotations: BTreeMap<String, String>,
    ) -> Result<Self, CodecError> {
        if chunk_size == 0 {
            return Err(CodecError::invariant("chunk size must be at least 1"));
        }
        let parts = parts_for(file_size, chunk_size);
        let total_parts = u32::try_from(parts)
            .map_err(|_| CodecError::invariant(format!("{parts} parts exceeds u32")))?;
        let header = Self {
            hash_file,
            sender,
            package_name: package_name.into(),
            file_name: file_name.into(),
            file_size,
            total_parts,
            chunk_size,
            annotations,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.file_size == 0 {
            return Err(CodecError::invariant("file size must be at least 1"));
        }
        if self.chunk_size == 0 {
            return Err(CodecError::invariant("chunk size must be at least 1"));
        }
        if self.file_name.is_empty() {
            return Err(CodecError::invariant("file name is empty"));
        }
        let expected = parts_for(self.file_size, self.chunk_size);
        if u64::from(self.total_parts) != expected {
            return Err(CodecError::invariant(format!(
                "parts={} but ceil({}/{})={}",
                self.total_parts, self.file_size, self.chunk_size, expected
            )));
        }
        Ok(())
    }

    /// Expected payload length of fragment `index`.
    pub fn part_len(&self, index: u32) -> Option<u32> {
        if index >= self.total_parts {
            return None;
        }
        if index + 1 < self.total_parts {
            return Some(self.chunk_size);
        }
        let tail = self.file_size - u64::from(self.chunk_size) * u64::from(self.total_parts - 1);
        Some(tail as u32)
    }
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    hash_file: String,
    sender: &'a str,
    package: &'a str,
    file: &'a str,
    size: u64,
    parts: u32,
    chunk: u32,
    annotations: &'a BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    hash_file: String,
    sender: String,
    package: String,
    file: String,
    size: u64,
    parts: u32,
    chunk: u32,
    #[serde(deserialize_with = "unique_map")]
    annotations: BTreeMap<String, String>,
}

/// Canonical JSON encoding; key order is fixed by the struct layout.
pub fn encode_header(h: &ImageHeader) -> Vec<u8> {
    debug_assert!(h.validate().is_ok());
    let out = HeaderOut {
        hash_file: h.hash_file.to_hex(),
        sender: h.sender.as_str(),
        package: &h.package_name,
        file: &h.file_name,
        size: h.file_size,
        parts: h.total_parts,
        chunk: h.chunk_size,
        annotations: &h.annotations,
    };
    serde_json::to_vec(&out).expect("header serialization is infallible")
}

pub fn decode_header(bytes: &[u8]) -> Result<ImageHeader, CodecError> {
    let raw: HeaderIn = serde_json::from_slice(bytes).map_err(json_error)?;
    let header = ImageHeader {
        hash_file: HashId::from_hex(&raw.hash_file)?,
        sender: SenderId::new(raw.sender)?,
        package_name: raw.package,
        file_name: raw.file,
        file_size: raw.size,
        total_parts: raw.parts,
        chunk_size: raw.chunk,
        annotations: raw.annotations,
    };
    header.validate()?;
    Ok(header)
}

fn unique_map<'de, D>(deserializer: D) -> Result<BTreeMap<String, String>, D::Error>
where
    D: Deserializer<'de>,
{
    struct UniqueMap;

    impl<'de> Visitor<'de> for UniqueMap {
        type Value = BTreeMap<String, String>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("a string-to-string map with unique keys")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
            let mut out = BTreeMap::new();
            while let Some((k, v)) = access.next_entry::<String, String>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("duplicate annotation key {k:?}")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(UniqueMap)
}

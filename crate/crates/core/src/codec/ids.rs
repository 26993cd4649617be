use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::CodecError;

/// SHA-256 digest identifying one image transfer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashId([u8; 32]);

impl HashId {
    pub const LEN: usize = 32;

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Lowercase 64-character hex rendering.
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Parses a 64-character hex string. Upper-case digits are accepted but
    /// rendering is always lowercase.
    pub fn from_hex(s: &str) -> Result<Self, CodecError> {
        if s.len() != 64 {
            return Err(CodecError::malformed(format!(
                "hash_file must be 64 hex chars, got {}",
                s.len()
            )));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| CodecError::malformed(format!("hash_file is not hex: {e}")))?;
        Ok(Self(out))
    }

    /// First 12 hex characters, used for short display and path suffixes.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Display for HashId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for HashId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashId({})", self.short())
    }
}

impl FromStr for HashId {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for HashId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for HashId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Identity of a node on the network. Used verbatim as a topic segment, so
/// it can never contain `/`, `+` or `#`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SenderId(String);

impl SenderId {
    pub const MAX_LEN: usize = 128;

    pub fn new(value: impl Into<String>) -> Result<Self, CodecError> {
        let value = value.into();
        if value.is_empty() {
            return Err(CodecError::invariant("sender id is empty"));
        }
        if value.len() > Self::MAX_LEN {
            return Err(CodecError::invariant(format!(
                "sender id is {} bytes, max {}",
                value.len(),
                Self::MAX_LEN
            )));
        }
        if value.contains(['/', '+', '#']) {
            return Err(CodecError::invariant(format!(
                "sender id {value:?} contains a topic separator or wildcard"
            )));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SenderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for SenderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl FromStr for SenderId {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl AsRef<str> for SenderId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl Serialize for SenderId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for SenderId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::new(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let id = HashId::from_bytes([0xab; 32]);
        let hex = id.to_hex();
        assert_eq!(hex.len(), 64);
        assert_eq!(hex, hex.to_lowercase());
        assert_eq!(HashId::from_hex(&hex).unwrap(), id);
        assert_eq!(HashId::from_hex(&hex.to_uppercase()).unwrap(), id);
    }

    #[test]
    fn hex_rejects_bad_input() {
        assert!(HashId::from_hex("abc").is_err());
        assert!(HashId::from_hex(&"zz".repeat(32)).is_err());
    }

    #[test]
    fn sender_id_rules() {
        assert!(SenderId::new("pc1").is_ok());
        assert!(SenderId::new("Sample PC1").is_ok());
        assert!(SenderId::new("").is_err());
        assert!(SenderId::new("a/b").is_err());
        assert!(SenderId::new("a+").is_err());
        assert!(SenderId::new("#").is_err());
        assert!(SenderId::new("x".repeat(128)).is_ok());
        assert!(SenderId::new("x".repeat(129)).is_err());
    }
}

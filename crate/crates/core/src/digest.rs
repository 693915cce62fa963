//! Stable 64-bit digests over canonical serializations.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// First 8 bytes (big-endian) of the SHA-256 of the input.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest64(pub u64);

impl Digest64 {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let hash = Sha256::digest(bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&hash[..8]);
        Digest64(u64::from_be_bytes(head))
    }

    /// Digest of the canonical JSON encoding of `value`.
    pub fn of_json<T: Serialize + ?Sized>(value: &T) -> Self {
        let bytes = serde_json::to_vec(value).expect("canonical serialization is infallible");
        Self::of_bytes(&bytes)
    }

    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(Digest64)
    }
}

impl fmt::Debug for Digest64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest64({})", self.to_hex())
    }
}

impl fmt::Display for Digest64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest64 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest64 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest64::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 16 hex digits"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let d = Digest64::of_bytes(b"abc");
        assert_eq!(Digest64::from_hex(&d.to_hex()), Some(d));
        // SHA-256("abc") starts with ba7816bf8f01cfea
        assert_eq!(d.to_hex(), "ba7816bf8f01cfea");
    }

    #[test]
    fn rejects_bad_hex() {
        assert_eq!(Digest64::from_hex("xyz"), None);
        assert_eq!(Digest64::from_hex("ba7816bf8f01cfeg"), None);
    }
}

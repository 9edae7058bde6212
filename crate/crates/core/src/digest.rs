//! Content digests and the canonical JSON form they are computed over.
//!
//! Canonical form: UTF-8, object keys sorted, LF line endings inside
//! strings, no insignificant whitespace.

use md5::Md5;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChecksumAlgorithm {
    #[default]
    Md5,
    Sha256,
}

impl ChecksumAlgorithm {
    pub fn digest_hex(self, bytes: &[u8]) -> String {
        match self {
            ChecksumAlgorithm::Md5 => hex::encode(Md5::digest(bytes)),
            ChecksumAlgorithm::Sha256 => hex::encode(Sha256::digest(bytes)),
        }
    }
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Rebuild a JSON value with sorted keys and LF-normalized strings.
pub fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            // serde_json's default map is a BTreeMap, so collecting sorts keys.
            let sorted: serde_json::Map<String, Value> = map
                .iter()
                .map(|(k, v)| (k.clone(), canonicalize(v)))
                .collect();
            Value::Object(sorted)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        Value::String(s) => Value::String(normalize_newlines(s)),
        other => other.clone(),
    }
}

pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let raw = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&canonicalize(&raw))?)
}

pub fn canonical_digest<T: Serialize + ?Sized>(
    value: &T,
    algorithm: ChecksumAlgorithm,
) -> Result<String> {
    Ok(algorithm.digest_hex(canonical_json(value)?.as_bytes()))
}

pub fn normalize_newlines(s: &str) -> String {
    if s.contains('\r') {
        s.replace("\r\n", "\n").replace('\r', "\n")
    } else {
        s.to_string()
    }
}

/// Pretty JSON with a trailing newline, used for every artifact written to disk.
pub fn to_pretty_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_order_does_not_change_digest() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":{"y":2,"x":[1,2]}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":{"x":[1,2],"y":2},"b":1}"#).unwrap();
        assert_eq!(
            canonical_digest(&a, ChecksumAlgorithm::Md5).unwrap(),
            canonical_digest(&b, ChecksumAlgorithm::Md5).unwrap()
        );
    }

    #[test]
    fn crlf_is_normalized() {
        let a = serde_json::json!({"t": "a\r\nb"});
        let b = serde_json::json!({"t": "a\nb"});
        assert_eq!(canonical_json(&a).unwrap(), canonical_json(&b).unwrap());
    }

    #[test]
    fn known_vectors() {
        assert_eq!(
            ChecksumAlgorithm::Md5.digest_hex(b"abc"),
            "900150983cd24fb0d6963f7d28e17f72"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

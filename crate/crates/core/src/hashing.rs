use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON encoding. Struct fields serialize in
/// declaration order and maps used in reports are `BTreeMap`s, so the encoding
/// is stable for a given value.
pub fn json_hash<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Hex SHA-256 over the little-endian `f64` encoding of the values.
pub fn digest_values<'a, S: Scalar>(chunks: impl IntoIterator<Item = &'a [S]>) -> String {
    let mut h = Sha256::new();
    for chunk in chunks {
        for v in chunk {
            h.update(v.f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

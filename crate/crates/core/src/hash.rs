//! SHA-256 helpers for linking artifacts by content hash.

use sha2::{Digest, Sha256};

pub const HASH_LEN: usize = 32;

pub fn sha256(bytes: &[u8]) -> [u8; HASH_LEN] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    to_hex(&sha256(bytes))
}

pub fn to_hex(digest: &[u8; HASH_LEN]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

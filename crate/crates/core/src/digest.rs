use sha2::{Digest, Sha256};

/// SHA-256 over length-prefixed parts, so `["ab", "c"]` and `["a", "bc"]`
/// never collide.
pub(crate) fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

pub(crate) fn sha256_hex(parts: &[&[u8]]) -> String {
    hex::encode(sha256_parts(parts))
}

pub(crate) fn u64_of(parts: &[&[u8]]) -> u64 {
    let d = sha256_parts(parts);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

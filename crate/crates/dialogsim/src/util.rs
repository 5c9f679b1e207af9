//! Small shared helpers: content digests, stable floating-point summation,
//! wall-clock access.

use sha2::{Digest, Sha256};

/// Full SHA-256 digest of `bytes`, lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Truncated (12 hex chars) content digest, used for ids that should be
/// short enough to read aloud but still collision-resistant at corpus scale.
pub fn short_digest(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..12].to_string()
}

/// Platform- and run-stable 64-bit hash. `std`'s default hasher is not
/// guaranteed stable across releases, so anything persisted or used for
/// deterministic routing goes through SHA-256 instead.
pub fn stable_hash_u64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Sum `terms` in a canonical order (ascending by `total_cmp`).
///
/// Floating-point addition is not associative, so summing the same multiset
/// of terms in two different orders can differ in the last bits. Sorting
/// first makes the result a function of the *multiset* alone, which is what
/// lets entropy and divergence values stay bit-identical when states or
/// chains are merely relabelled or reordered.
pub fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Milliseconds since the Unix epoch. Kept out of all content digests.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

//! Seed derivation and stable hashing helpers.
//!
//! Everything random in the framework flows from a master seed through
//! [`derive_seed`], so any component can be replayed in isolation and task
//! boundaries are resume points without serializing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// FNV-1a over a byte slice. Stable across platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a master seed and a role label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

/// Derive a child seed keyed by role and an index (e.g. task number).
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16 + label.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

/// Seeded generator for a given role. ChaCha8 is deterministic and portable.
pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Seeded generator for a given role and index.
pub fn rng_for_indexed(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(master, label, index))
}

/// Hex-encoded SHA-256 of a byte slice; used for config hashes, weight
/// hashes, and metric-stream identity checks.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of a flat f64 slice via its little-endian bytes. Bit-exact identity.
pub fn hash_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

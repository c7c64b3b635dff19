//! Seed handling. Every randomized component takes an explicit u64 seed;
//! child seeds are derived by hashing so streams never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a parent seed and a label.
pub fn split(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Derive a child seed from a parent seed and an index.
pub fn split_n(seed: u64, tag: &str, n: u64) -> u64 {
    split(split(seed, tag), &n.to_string())
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

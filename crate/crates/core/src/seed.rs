//! Seed derivation. Every stochastic step draws from a ChaCha stream whose seed is
//! derived from a parent seed and a label, so stages and items can be rerun alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// `derive(parent, label)` = first 8 bytes (little endian) of SHA-256(parent_le || label).
pub fn derive(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for the `index`-th item under `parent`.
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    derive(parent, &format!("{label}/{index}"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

//! Seeded random streams.
//!
//! Every stochastic operation draws from a [`ChaCha8Rng`]. Independent
//! streams (one per image, per training step, ...) are keyed by a sub-seed
//! derived from a parent seed and a textual label through SHA-256, so the
//! streams do not depend on scheduling order or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// First eight bytes (little-endian) of `SHA-256(seed_le || label)` with the
/// top bit cleared, so derived seeds fit the signed integers of TOML
/// manifests.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) & (u64::MAX >> 1)
}

pub fn derived_rng(seed: u64, label: &str) -> Rng {
    rng_from_seed(derive_seed(seed, label))
}

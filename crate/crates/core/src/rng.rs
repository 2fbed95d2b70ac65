//! Deterministic seeding helpers.
//!
//! All stochastic paths derive their stream from a global run seed plus a
//! string label, so any sub-stream can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// ChaCha stream keyed by `(seed, label)`. Identical inputs give identical
/// streams on every platform.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

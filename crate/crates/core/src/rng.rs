//! Seed derivation. Every stochastic step draws from a ChaCha stream whose
//! seed is a hash of the run seed and a textual tag, so the draw for one
//! recording (or grid cell, or fold) is independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Mixes `seed` with `tag` into a new 64-bit seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, tag: &str) -> Rng {
    rng_from(derive_seed(seed, tag))
}

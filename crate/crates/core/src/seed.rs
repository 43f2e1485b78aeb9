//! Keyed sub-seed derivation.
//!
//! Every stage draws its randomness from `derive(master, key)`, so adding a
//! stage or reordering calls never perturbs the stream another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derives a 64-bit sub-seed from a master seed and a textual key.
pub fn derive(master: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn keyed_rng(master: u64, key: &str) -> StageRng {
    rng(derive(master, key))
}

//! Seed derivation and seeded generators.
//!
//! Every random stream in the pipeline descends from one 64-bit root seed.
//! A child seed is the first eight bytes (little endian) of
//! `SHA-256(root_le || phase_name || index_le)`, so phases never share a
//! stream and adding a phase never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

pub fn derive_seed(root: u64, phase: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(phase.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a named child stream of `root`.
pub fn child_rng(root: u64, phase: &str, index: u64) -> SeededRng {
    seeded_rng(derive_seed(root, phase, index))
}

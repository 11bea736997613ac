//! Deterministic seed fan-out.
//!
//! All randomness in a run flows from one top-level seed. Every stage (and
//! every per-document stream inside a stage) derives its own independent
//! ChaCha stream from `(seed, tag...)`, so stages can be reordered or
//! parallelized without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a parent seed and a list of string tags.
pub fn derive_seed(seed: u64, tags: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for tag in tags {
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

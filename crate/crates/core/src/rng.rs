//! Seed derivation: one root seed fans out into named, order-independent
//! sub-seeds so that every consumer of randomness owns a private stream.
//!
//! Derivation hashes `(parent, label, index)` with SHA-256 and keeps the
//! first eight bytes, so child streams never alias each other or the parent
//! and inserting a new consumer does not shift existing streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a parent seed, a static label, and an index.
pub fn child_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// Builds the deterministic generator for a seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Convenience for the common derive-then-build pattern.
pub fn child_rng(parent: u64, label: &str, index: u64) -> ChaCha8Rng {
    rng_from(child_seed(parent, label, index))
}

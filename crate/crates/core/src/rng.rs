//! Seed management.
//!
//! Every source of randomness in a run is a named substream derived from the
//! master seed, so adding or reordering one consumer never perturbs another.
//! A substream is identified by a string tag plus integer indices (round,
//! client id, ...); the tuple is hashed with SHA-256 into a 32-byte ChaCha12
//! seed. ChaCha12 is deterministic across platforms, unlike `thread_rng`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG used everywhere in the crate.
pub type Stream = ChaCha12Rng;

/// Derive the substream `(tag, indices)` of `master`.
pub fn substream(master: u64, tag: &str, indices: &[u64]) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0xff]); // domain separator between seed and tag
    hasher.update(tag.as_bytes());
    for ix in indices {
        hasher.update([0xfe]);
        hasher.update(ix.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

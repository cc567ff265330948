//! Seed plumbing.
//!
//! All randomness descends from one user seed. Each consumer asks for a named
//! sub-stream, so changing how many draws one stage makes never shifts the
//! draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive a child seed from a parent seed and a stream name.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name))
}

/// Sub-stream indexed by an integer (replicate, chunk, fold ...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(derive_seed(seed, name), &index.to_string()))
}

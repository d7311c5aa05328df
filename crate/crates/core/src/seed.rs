//! Stable fan-out of a single global seed into independent random streams.
//!
//! Every consumer of randomness names its stream with a label and a list of
//! integer coordinates (consumer index, day, ...). The derived seed depends
//! only on those inputs, so results never depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used for every stochastic operation in the crate.
pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(seed: u64, label: &str, coords: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for c in coords {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn stream(seed: u64, label: &str, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, label, coords))
}

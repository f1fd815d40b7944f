//! Named random streams derived from one global seed.
//!
//! Each consumer (split, init, sampling, pruning, ...) draws from its own
//! stream so toggling one component leaves the other streams untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const PRUNE: &str = "prune";
pub const SYNTH: &str = "synth";

/// Derives an independent generator for `name` from `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derives a sub-stream, e.g. one per stage or per round.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    stream(seed, &format!("{name}/{index}"))
}

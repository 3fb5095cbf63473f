//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator used for every stream in the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream label.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(parent ^ splitmix64(h))
}

/// Derives a child seed from a parent seed and an index (episode, worker, ...).
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(parent, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Root of all randomness in a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTree {
    /// Network initialization.
    pub init: u64,
    /// Per-episode environment seeds are derived from this one.
    pub env: u64,
    /// Replay minibatch sampling.
    pub sampler: u64,
    /// Exploration draws.
    pub policy: u64,
}

impl SeedTree {
    pub fn from_master(master: u64) -> Self {
        Self {
            init: derive_seed(master, "init"),
            env: derive_seed(master, "env"),
            sampler: derive_seed(master, "sampler"),
            policy: derive_seed(master, "policy"),
        }
    }
}

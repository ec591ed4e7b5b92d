//! Per-purpose random streams derived from one run seed.
//!
//! Each stream is seeded from a hash of the run seed and the stream name,
//! so adding draws to one subsystem never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Every stream a training run draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStreams {
    /// Environment layouts and stochastic observations.
    pub env: ChaCha8Rng,
    /// Parameter initialization.
    pub model_init: ChaCha8Rng,
    /// Replay sequence sampling.
    pub replay: ChaCha8Rng,
    /// Latent samples while filtering real observations, and behaviour actions.
    pub collect: ChaCha8Rng,
    /// World-model training latents and actor-critic imagination.
    pub train: ChaCha8Rng,
    /// Planner candidate rollouts.
    pub imagination: ChaCha8Rng,
    /// Meta-policy decisions and PPO shuffling.
    pub meta: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            env: stream(seed, "env"),
            model_init: stream(seed, "model_init"),
            replay: stream(seed, "replay"),
            collect: stream(seed, "collect"),
            train: stream(seed, "train"),
            imagination: stream(seed, "imagination"),
            meta: stream(seed, "meta"),
        }
    }
}

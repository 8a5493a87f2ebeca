//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by
//! `(seed, stream kind, index)`, so weight init, data order and augmentation
//! can be replayed independently of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ALGORITHM: &str = "chacha8";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Data = 4,
    Calibration = 5,
    Probe = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed }
    }

    /// Generator for `kind`, sub-indexed by `index` (e.g. epoch number).
    pub fn stream(&self, kind: Stream, index: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((kind as u64) << 32) | index as u64);
        rng
    }
}

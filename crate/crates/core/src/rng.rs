//! Counter-based random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(purpose, step, slot)` under the run's root seed. Streams are ChaCha
//! keyed by the root seed with the stream id derived from the key, so the
//! draws of one slot never depend on how many draws another slot made.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha12Rng;

/// What a stream is used for. Keeps streams of different subsystems apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Corpus = 1,
    Encoder = 2,
    Scorer = 3,
    Clustering = 4,
    TaskGen = 5,
    Split = 6,
    BatchSample = 7,
    Augment = 8,
    Init = 9,
    Downstream = 10,
    Benchmark = 11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    pub seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, purpose: Purpose, step: u64, slot: u64) -> StreamRng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_id(purpose as u64, step, slot));
        rng
    }

    /// A child seed for a nested pipeline (e.g. one benchmark seed).
    pub fn derive_seed(&self, purpose: Purpose, slot: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(stream_id(purpose as u64, 0, slot)))
    }
}

fn stream_id(purpose: u64, step: u64, slot: u64) -> u64 {
    let mut h = splitmix64(purpose);
    h = splitmix64(h ^ step);
    splitmix64(h ^ slot.rotate_left(32))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

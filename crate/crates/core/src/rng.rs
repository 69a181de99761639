//! Seeded random streams.
//!
//! Every stochastic call site owns an independent ChaCha stream derived from
//! `(global seed, tag, index)`, so results do not depend on call order or on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract; never
/// renumber.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const RADAR_NOISE: u64 = 2;
    pub const CAMERA_JITTER: u64 = 3;
    pub const RADAR_JITTER: u64 = 4;
    pub const MIX: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const LOG_DELIVERY: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> SimRng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index);
    let mut rng = SimRng::seed_from_u64(key);
    rng.set_stream(tag);
    rng
}

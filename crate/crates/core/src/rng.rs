//! Seed derivation. Every random stream in the simulator is a ChaCha8 generator
//! keyed by a base seed plus a tuple of tags, so results never depend on the
//! order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stable tags for the named streams.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const LOCAL_TRAIN: u64 = 4;
    pub const GENERATOR_INIT: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const LATENT_INIT: u64 = 7;
    pub const DP_NOISE: u64 = 8;
    pub const ATTACK: u64 = 9;
    pub const SPLIT: u64 = 10;
}

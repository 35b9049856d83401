//! Deterministic seed derivation. Every random stream in the pipeline is a
//! ChaCha8 generator keyed by a tuple of integers, so results depend only on
//! those integers and never on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the parts into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Stream tags keep independent uses of the same run seed apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const EMBED: u64 = 8;
    pub const PERCEPTUAL: u64 = 9;
    pub const PATCHES: u64 = 10;
}

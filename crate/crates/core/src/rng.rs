//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`), whose output stream is
//! fixed by its seed on every platform. Independent streams are derived from a
//! master seed and a stream tag with SplitMix64, so adding a consumer never
//! shifts the draws seen by another.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_add(0xA5A5_A5A5)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    rng(derive(seed, tag))
}

/// Stream tags used across the crate.
pub mod tags {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const BATCHES: u64 = 4;
    pub const FOLDS: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const VAL_BATCHES: u64 = 7;
}

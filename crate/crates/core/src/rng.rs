//! Counter-based seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from
//! `derive_seed(master, stream, index)`, so any frame can be regenerated on its
//! own and parallel rendering order never matters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags.
pub const STREAM_SURFACE: u64 = 1;
pub const STREAM_FRAME_NOISE: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_INIT: u64 = 4;
pub const STREAM_SHUFFLE: u64 = 5;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.rotate_left(32)) ^ index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

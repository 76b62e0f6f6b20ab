//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`Rng64`], the SplitMix64
//! generator (64-bit state, Steele/Lea/Flood 2014). Its output sequence is fully
//! specified by the seed and is identical on every platform. Independent streams
//! (per class, per epoch) are obtained with [`stream`], which mixes a stream tag
//! into the seed instead of sharing one generator, so parallel work never
//! depends on scheduling order.

use rand::SeedableRng;

pub use rand_xoshiro::SplitMix64 as Rng64;

/// Stream tags. Distinct purposes never share a stream.
pub mod tag {
    pub const NEGATIVES: u64 = 0x6e65_6761;
    pub const SYNTH_CLASS: u64 = 0x7379_6e74;
    pub const SYNTH_KAPPA: u64 = 0x6b61_7070;
    pub const SYNTH_CENTROID: u64 = 0x6365_6e74;
    pub const BATCHES: u64 = 0x6261_7463;
    pub const ENCODER_INIT: u64 = 0x656e_6364;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let a = mix(seed.wrapping_add(GOLDEN));
    let b = mix(a ^ tag.wrapping_mul(GOLDEN));
    mix(b ^ index.wrapping_add(1).wrapping_mul(0xd605_bbb5_8c8a_bbd5))
}

/// Generator for the stream `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng64 {
    Rng64::seed_from_u64(derive_seed(seed, tag, index))
}

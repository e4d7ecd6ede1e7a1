//! Seed derivation shared by every generator in the crate.
//!
//! Child seeds come from a counter scheme: child `i` of master `m` is the
//! SplitMix64 output for state `m + (i + 1)·0x9E3779B97F4A7C15`. Sequence `i`
//! of a dataset, sequence `i` of a degradation pass and iteration streams all
//! use this, with distinct `stream` tags mixed in so they never collide.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Child seed for a named stream, so that e.g. augmentation and masking draws
/// of the same run are independent.
pub fn derive_stream(master: u64, stream: &str, index: u64) -> u64 {
    let tag = stream.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    });
    derive_seed(master ^ tag, index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

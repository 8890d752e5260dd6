//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] constructed from
//! an explicit 64-bit seed. Independent streams (train batches, validation
//! batches, per-trial harness draws, per-group initialisations) are obtained by
//! mixing a base seed with a stream label through SplitMix64. Adding or removing
//! one consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TagRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> TagRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for a numbered sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Derives an independent seed for a named sub-stream (FNV-1a over the label).
pub fn derive_seed_labeled(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive_seed(seed, h)
}

//! Counter-based sub-seed derivation.
//!
//! Every random stream in a run is keyed by `(root seed, purpose tag, index)`.
//! The tag is folded with FNV-1a and the triple is mixed with the SplitMix64
//! finalizer, so streams for different purposes or indices are independent
//! and never depend on the order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives the sub-seed for `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(
        splitmix64(seed ^ fnv1a(tag)) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)),
    )
}

/// A ChaCha8 generator seeded from [`derive_seed`].
pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

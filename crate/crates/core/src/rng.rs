//! Seeding scheme.
//!
//! Every random stream in the crate is a `ChaCha8Rng` (a counter-based
//! stream cipher generator with a portable, documented output sequence).
//! Sub-streams are keyed by folding a list of integer tags into the master
//! seed with the SplitMix64 finalizer, so the stream used for, say, Gram
//! entry `(3, 7)` depends only on `(seed, 3, 7)` and never on evaluation
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and an ordered list of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tags: &[u64]) -> Rng {
    rng_from_seed(derive_seed(master, tags))
}

//! Splittable seeding.
//!
//! Every random object in the crate is generated from a `ChaCha8Rng` whose
//! 64-bit seed is derived from a root seed and a stream index by a SplitMix64
//! finalizer. Derived streams are independent for distinct indices, so tasks
//! (or bootstrap replicates, chains, ...) can be generated in any order while
//! remaining bit-identical for a fixed `(root, index)` pair.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer (Steele et al. mixing constants).
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a root seed and a stream index.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream))
}

/// Counter-based RNG for the given `(root, stream)` pair.
pub fn stream_rng(root: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}

/// RNG seeded directly by `seed`.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

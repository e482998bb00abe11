//! Deterministic seed derivation.
//!
//! Every sampling site derives its own ChaCha stream from a base seed plus a
//! tag path (epoch, iteration, sample index, ...). Streams are therefore
//! independent of worker count and evaluation order, which is what makes
//! parallel evaluation and training resume reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche behaviour for seed mixing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from a base seed and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x6a09_e667_f3bc_c908);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// ChaCha stream for a derived seed.
pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Tag constants for the major sampling sites, so call sites can't collide.
pub mod tag {
    pub const TRAIN_SAMPLE: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const EVALUATION: u64 = 3;
    pub const PARAM_INIT: u64 = 4;
    pub const BENCH: u64 = 5;
    pub const GEN: u64 = 6;
}

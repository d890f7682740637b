//! Deterministic random stream derivation.
//!
//! Every random decision in the crate flows from a `u64` seed through
//! [`derive_rng`], which mixes the seed with a list of stream tags
//! (step index, batch row, purpose id, ...). Identical seeds and tags
//! give identical streams on every platform and every run, which is what
//! the reproducibility contracts of the trainer and sampler rely on.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; a fixed, well-mixed 64-bit permutation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix `seed` with stream `tags` into a single 64-bit stream key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(seed);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

/// Derive an independent deterministic RNG for (seed, tags).
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// Stream tags used by the trainer so that the window sampler, the
/// augmentation pipeline and the negative sampler never share a stream.
pub mod stream {
    pub const WINDOWS: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const INIT: u64 = 4;
}

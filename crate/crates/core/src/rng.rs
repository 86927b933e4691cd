//! Seed derivation and seeded random sources.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] built from an
//! explicit 64-bit seed, so identical seeds give identical streams on every
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives an independent seed from `base` and a named purpose.
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    splitmix64(base ^ splitmix64(fnv1a(purpose.as_bytes())))
}

/// Derives the seed for item `index` of a stream.
pub fn derive_indexed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base).wrapping_add(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random source for item `index` of the stream rooted at `base`.
pub fn indexed_rng(base: u64, index: u64) -> Rng {
    rng_from_seed(derive_indexed(base, index))
}

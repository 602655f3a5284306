//! Seed derivation. Every random stream in the crate is derived from one
//! user seed plus a stream name, so adding a consumer never shifts the
//! values another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Seed for the named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> u64 {
    mix64(seed ^ mix64(hash_str(name)))
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, name))
}

/// Counter-based uniform draw in [0, 1): a pure function of `(stream, index)`.
#[inline]
pub fn counter_uniform(stream: u64, index: u64) -> f64 {
    let bits = mix64(stream ^ mix64(index));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

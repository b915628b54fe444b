//! Seed derivation and the RNG type used throughout the crate.

use rand::SeedableRng;

pub use rand_chacha::ChaCha8Rng as SeedRng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a chain of stream indices,
/// e.g. `(global seed, example index)` for per-example worker streams.
pub fn seed_chain(base: u64, streams: &[u64]) -> u64 {
    let mut s = mix(base);
    for &v in streams {
        s = mix(s ^ v.wrapping_mul(0x2545f4914f6cdd1d));
    }
    s
}

pub fn rng(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

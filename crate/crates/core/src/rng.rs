//! Seeded randomness. Every stochastic component draws from a SplitMix64
//! stream (increment `0x9e3779b97f4a7c15`, finaliser multipliers
//! `0xbf58476d1ce4e5b9` and `0x94d049bb133111eb`) so results do not depend on
//! the platform RNG.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

pub type SeededRng = SplitMix64;

pub fn seeded(seed: u64) -> SeededRng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = seeded(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.random()
}

pub fn normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

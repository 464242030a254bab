//! Reproducible randomness.
//!
//! Every random draw in the crate goes through [`IcsRng`], which is ChaCha8
//! keyed by `SeedableRng::seed_from_u64` (the u64 seed is expanded to the
//! 256-bit key with PCG32, as documented by `rand_core`). Normal deviates use
//! `rand_distr::StandardNormal` (ziggurat). Both crates are pinned in the
//! manifest, so a seed yields the same bytes across runs and machines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type IcsRng = ChaCha8Rng;

pub fn rng(seed: u64) -> IcsRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` i.i.d. draws from N(0, std²).
pub fn normal_vec(rng: &mut IcsRng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn uniform_vec(rng: &mut IcsRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

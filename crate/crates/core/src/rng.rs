//! Portable pseudo-random streams.
//!
//! Every random draw in the crate goes through xoshiro256** seeded with
//! SplitMix64, and floats are built from the top 53 bits of each output so
//! that ports to other languages reproduce identical sequences.

use rand_core::{RngCore, SeedableRng};
pub use rand_xoshiro::Xoshiro256StarStar as Prng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Splits `seed` into independent streams: stream `k` is the master
/// generator advanced by `k` jumps of 2^128 outputs.
pub fn streams(seed: u64, count: usize) -> Vec<Prng> {
    let mut cursor = seeded(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(cursor.clone());
        cursor.jump();
    }
    out
}

/// Uniform in `[0, 1)`.
pub fn unit(rng: &mut Prng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Uniform integer in `0..n` (`n > 0`).
pub fn below(rng: &mut Prng, n: usize) -> usize {
    ((unit(rng) * n as f64) as usize).min(n - 1)
}

pub fn bernoulli(rng: &mut Prng, p: f64) -> bool {
    unit(rng) < p
}

/// Standard normal via Box-Muller (one output per call).
pub fn standard_normal(rng: &mut Prng) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates shuffle driven by [`below`].
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // SplitMix64 finalizer over the combined value.
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

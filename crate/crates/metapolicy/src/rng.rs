//! Deterministic seeding utilities.
//!
//! Every random draw in the crate flows through a `ChaCha8Rng` seeded from a
//! `u64`. Child seeds are derived with [`mix`], a fixed SplitMix64 hash of the
//! parent seed and a stream index, so batches of rollouts stay reproducible
//! regardless of how many threads collect them.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tag for environment-internal noise (process/sensing noise).
pub const STREAM_ENV: u64 = 0x45;
/// Stream tag for policy-side sampling (softmax draws, voting draws).
pub const STREAM_POLICY: u64 = 0x50;

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, index)`.
///
/// child = splitmix64(splitmix64(seed) ^ splitmix64(index + 1))
///
/// The inner hashes decorrelate structured inputs (consecutive seeds,
/// consecutive trajectory indices); the `+ 1` keeps index 0 from acting as an
/// identity element.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(1)))
}

/// Seeded generator for one stream of randomness.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller.
///
/// `rand_distr` would work too, but the ziggurat layer tables have shifted
/// across releases; two explicit uniform draws keep byte-level reproducibility
/// under our control.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

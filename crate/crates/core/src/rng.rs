//! Seed derivation and deterministic random sampling.
//!
//! Every random choice in the crate flows from a `u64` seed through
//! [`derive_seed`] into its own ChaCha stream. Deriving streams from
//! (seed, tag, counter) rather than sharing one generator means a run can
//! be resumed mid-training and replay the exact draws it would have made,
//! and adding a strategy to a sweep never perturbs the other runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed, a purpose tag, and a counter.
///
/// The tag keeps independent consumers (init, batching, dropout, ...) on
/// disjoint streams; the counter separates repeated uses such as epochs
/// or steps.
pub fn derive_seed(root: u64, tag: &str, counter: u64) -> u64 {
    let mut h = splitmix64(root);
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ counter)
}

/// A ChaCha stream for the given derived seed.
pub fn stream(root: u64, tag: &str, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, counter))
}

/// Standard normal sample via Box-Muller; two uniform draws per call.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen::<f64>();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_tags_and_counters() {
        let a = derive_seed(7, "init", 0);
        let b = derive_seed(7, "init", 1);
        let c = derive_seed(7, "batch", 0);
        let d = derive_seed(8, "init", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        // Stable across calls.
        assert_eq!(a, derive_seed(7, "init", 0));
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = stream(3, "test", 0);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}

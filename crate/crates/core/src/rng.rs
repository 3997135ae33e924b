//! Seeded random sampling helpers.
//!
//! Every stochastic routine in the crate draws from a [`ChaCha8Rng`] seeded by
//! the caller, so a run is fully determined by its seed. Gaussian variates use
//! Box-Muller directly on top of the stream to keep the draw sequence
//! independent of any distribution crate's internals.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Build the crate's standard generator from a 64-bit seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard normal draw via Box-Muller. Consumes two uniforms.
pub fn next_gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Guard the log against an exact zero uniform.
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a buffer with standard normal draws.
pub fn gaussian_vec<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| next_gaussian(rng)).collect()
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Deterministic in-place Fisher-Yates shuffle of an index vector.
pub fn shuffle<R: Rng, T>(rng: &mut R, items: &mut [T]) {
    if items.is_empty() {
        return;
    }
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_same_seed_same_stream() {
        let a = gaussian_vec(&mut seeded(42), 32);
        let b = gaussian_vec(&mut seeded(42), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn test_different_seed_different_stream() {
        let a = gaussian_vec(&mut seeded(1), 8);
        let b = gaussian_vec(&mut seeded(2), 8);
        assert_ne!(a, b);
    }

    #[test]
    fn test_gaussian_moments() {
        let mut rng = seeded(9);
        let n = 200_000;
        let draws = gaussian_vec(&mut rng, n);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn test_shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        shuffle(&mut seeded(5), &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, (0..100).collect::<Vec<_>>());
    }
}

//! Numerical derivative checking utilities.
//!
//! These exist for tests and the acceptance suite, but they are part of the
//! public surface so downstream experiments can verify gradients of their own
//! compositions.

/// Central finite-difference gradient of a scalar function at `x`, with step
/// `h` per coordinate.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative discrepancy between two vectors, with the scale floored
/// at `|value| + 1e-8` so near-zero entries compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / (x.abs().max(y.abs()) + 1e-8))
        .fold(0.0, f64::max)
}

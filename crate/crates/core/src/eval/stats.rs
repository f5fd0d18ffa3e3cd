use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Relative slack when comparing permuted statistics to the observed one.
pub const PERM_TOLERANCE: f64 = 1e-12;

/// Two-sided paired permutation test on the mean difference using random
/// sign flips. Returns `(count + 1) / (iterations + 1)` where `count` is the
/// number of flips whose absolute mean difference reaches the observed one.
pub fn paired_perm_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid!("paired samples differ in length: {} vs {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(invalid!("paired test needs at least one pair"));
    }
    if iterations == 0 {
        return Err(invalid!("iterations must be positive"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let n = d.len() as f64;
    let observed = (d.iter().sum::<f64>() / n).abs();
    let cutoff = observed * (1.0 - PERM_TOLERANCE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..iterations {
        let s: f64 = d.iter().map(|&v| if rng.gen::<bool>() { v } else { -v }).sum();
        if (s / n).abs() >= cutoff {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iterations + 1) as f64)
}

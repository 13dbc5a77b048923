//! Shared finite-difference oracles for gradient tests.

#![allow(dead_code)]

use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Relative error with a small absolute floor so near-zero components are
/// compared absolutely at oracle precision.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub fn assert_close_slices(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        assert!(
            e < tol,
            "{what}[{i}]: analytic {a:.12e} vs numeric {n:.12e} (rel err {e:.3e} >= {tol:.1e})"
        );
    }
}

/// Uniform values in [-2, 2], the range used by the randomized checks.
pub fn random_values(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Uniform values in [-2, 2] excluding a margin around zero (for kinked or
/// singular ops like relu and recip).
pub fn random_values_away_from(rng: &mut impl Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() > margin {
                break v;
            }
        })
        .collect()
}

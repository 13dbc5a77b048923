//! Formatting and small numeric helpers shared across modules.

use crate::error::{CaviaError, Result};

/// Render an `f64` with 17 significant digits, enough to round-trip exactly.
/// Used by the checkpoint format and all CSV output.
pub fn format_g17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| CaviaError::Load(format!("invalid float: {s:?}")))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

/// 95% confidence interval half-width under the normal approximation.
pub fn ci95(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    1.96 * std_dev(xs) / (xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g17_round_trips_exactly() {
        for &x in &[0.1, -std::f64::consts::PI, 1.0 / 3.0, 2e-300, 1.7976931348623157e308] {
            let s = format_g17(x);
            assert_eq!(parse_f64(&s).unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn ci_halves_when_n_quadruples() {
        // Same sample std, four times the count.
        let base: Vec<f64> = (0..100).map(|i| (i % 10) as f64).collect();
        let quad: Vec<f64> = (0..400).map(|i| (i % 10) as f64).collect();
        let ratio = ci95(&base) / ci95(&quad);
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }
}

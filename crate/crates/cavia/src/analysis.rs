//! Linear-readout analysis of adapted context vectors.

use crate::error::{CaviaError, Result};
use crate::util::mean;

/// Solve `A w = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(CaviaError::Contract("singular normal equations".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut w = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * w[k];
        }
        w[row] = acc / a[row][row];
    }
    Ok(w)
}

/// Least-squares fit of `target ~ w0 + w . features` via ridge-stabilized
/// normal equations (the tiny ridge keeps constant features solvable; a
/// constant predictor then collapses to the intercept and scores R^2 = 0).
pub fn fit_linear_readout(features: &[Vec<f64>], target: &[f64]) -> Result<Vec<f64>> {
    if features.len() != target.len() || features.is_empty() {
        return Err(CaviaError::Contract("readout needs matching nonempty samples".into()));
    }
    let k = features[0].len();
    let n = k + 1; // intercept first
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    for (row, &y) in features.iter().zip(target) {
        let mut aug = Vec::with_capacity(n);
        aug.push(1.0);
        aug.extend_from_slice(row);
        for i in 0..n {
            for j in 0..n {
                ata[i][j] += aug[i] * aug[j];
            }
            atb[i] += aug[i] * y;
        }
    }
    for (i, row) in ata.iter_mut().enumerate().skip(1) {
        row[i] += 1e-10;
    }
    solve(ata, atb)
}

/// Coefficient of determination of the fitted readout on the same samples.
pub fn linear_readout_r2(features: &[Vec<f64>], target: &[f64]) -> Result<f64> {
    let w = fit_linear_readout(features, target)?;
    let y_mean = mean(target);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (row, &y) in features.iter().zip(target) {
        let pred = w[0] + row.iter().zip(&w[1..]).map(|(x, c)| x * c).sum::<f64>();
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - y_mean) * (y - y_mean);
    }
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - ss_res / ss_tot).max(0.0))
}

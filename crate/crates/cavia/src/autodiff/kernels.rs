//! Value-level kernels behind graph operations. All tensors are row-major.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Combine equal-length slices elementwise.
pub fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Combine a `[rows x cols]` tensor with a `[cols]` bias broadcast over rows.
pub fn zip_map_bias(a: &[f64], bias: &[f64], cols: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks_exact(cols) {
        for (&x, &y) in row.iter().zip(bias) {
            out.push(f(x, y));
        }
    }
    out
}

pub fn concat_rows(a: &[f64], b: &[f64], rows: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (p + q));
    for r in 0..rows {
        out.extend_from_slice(&a[r * p..(r + 1) * p]);
        out.extend_from_slice(&b[r * q..(r + 1) * q]);
    }
    out
}

pub fn concat_rows_broadcast(a: &[f64], b: &[f64], rows: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (p + b.len()));
    for r in 0..rows {
        out.extend_from_slice(&a[r * p..(r + 1) * p]);
        out.extend_from_slice(b);
    }
    out
}

pub fn slice_last(a: &[f64], last: usize, start: usize, len: usize) -> Vec<f64> {
    let rows = a.len() / last;
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&a[r * last + start..r * last + start + len]);
    }
    out
}

pub fn pad_last(a: &[f64], last: usize, start: usize, total: usize) -> Vec<f64> {
    let rows = a.len() / last;
    let mut out = vec![0.0; rows * total];
    for r in 0..rows {
        out[r * total + start..r * total + start + last].copy_from_slice(&a[r * last..(r + 1) * last]);
    }
    out
}

pub fn repeat_rows(a: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * a.len());
    for _ in 0..rows {
        out.extend_from_slice(a);
    }
    out
}

pub fn repeat_cols(a: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * cols);
    for &v in a {
        out.extend(std::iter::repeat(v).take(cols));
    }
    out
}

pub fn sum_all(a: &[f64]) -> f64 {
    a.iter().sum()
}

pub fn sum_axis0(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

pub fn sum_axis1(a: &[f64], cols: usize) -> Vec<f64> {
    a.chunks_exact(cols).map(|row| row.iter().sum()).collect()
}

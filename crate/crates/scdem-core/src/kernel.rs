//! Raw numeric kernels shared by the autodiff graph and inference paths.
//!
//! Keeping a single implementation of each formula means training, routing
//! and evaluation can never disagree bit-for-bit.

/// Probability floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense matmul: a[m×k] · b[k×n] → [m×n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + j] = e;
            z += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= z;
        }
    }
    out
}

fn floored(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

/// KL divergence Σ p·log(p/q) over one row, with the probability floor.
pub fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (floored(pi).ln() - floored(qi).ln()))
        .sum()
}

/// Shannon entropy −Σ p·log p over one row, with the probability floor.
pub fn entropy_row(p: &[f64]) -> f64 {
    -p.iter().map(|&pi| pi * floored(pi).ln()).sum::<f64>()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Standard normal CDF via the exact erf form.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Squared Euclidean distance between two points.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Pairwise squared-Euclidean cost matrix between row sets.
pub fn cost_matrix(x: &[f64], y: &[f64], bx: usize, by: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; bx * by];
    for i in 0..bx {
        for j in 0..by {
            c[i * by + j] = sq_dist(&x[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]);
        }
    }
    c
}

/// log(Σ exp(v)) with max-subtraction.
pub fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

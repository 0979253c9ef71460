//! Row-wise LayerNorm and softmax, with the backward rules the training
//! loop needs.

use super::matrix::Matrix;
use crate::error::{contract, Result};

/// Per-row mean and standard deviation of a matrix.
///
/// `std` is `sqrt(var + eps)` with the population variance, i.e. the exact
/// divisor LayerNorm used.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RowStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Mean and `sqrt(population variance + eps)` of every row.
pub fn row_stats(rows: &Matrix, eps: f64) -> RowStats {
    let d = rows.cols() as f64;
    let mut mean = Vec::with_capacity(rows.rows());
    let mut std = Vec::with_capacity(rows.rows());
    for i in 0..rows.rows() {
        let r = rows.row(i);
        let mu = r.iter().sum::<f64>() / d;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        mean.push(mu);
        std.push((var + eps).sqrt());
    }
    RowStats { mean, std }
}

/// LayerNorm over each row: `(x − μ) / sqrt(var + eps) · α + β`.
pub fn layer_norm(
    rows: &Matrix,
    alpha: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Matrix, RowStats)> {
    let d = rows.cols();
    if alpha.len() != d || beta.len() != d {
        return Err(contract(
            "layer_norm",
            format!(
                "{d} columns with alpha of length {} and beta of length {}",
                alpha.len(),
                beta.len()
            ),
        ));
    }
    if !(eps >= 0.0) {
        return Err(contract("layer_norm", format!("eps = {eps}")));
    }
    let stats = row_stats(rows, eps);
    let mut out = Matrix::zeros(rows.rows(), d);
    for i in 0..rows.rows() {
        let (mu, sd) = (stats.mean[i], stats.std[i]);
        // A zero-variance row with eps = 0 has an all-zero numerator.
        let inv = if sd > 0.0 { 1.0 / sd } else { 0.0 };
        let src = rows.row(i);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (src[k] - mu) * inv * alpha[k] + beta[k];
        }
    }
    Ok((out, stats))
}

/// Gradient of a LayerNorm with respect to its input rows.
///
/// `input` is the pre-norm matrix, `stats` the statistics the forward pass
/// produced, `grad_out` the gradient w.r.t. the normalized output.
pub fn layer_norm_backward(
    input: &Matrix,
    stats: &RowStats,
    alpha: &[f64],
    grad_out: &Matrix,
) -> Matrix {
    let d = input.cols();
    let df = d as f64;
    let mut grad_in = Matrix::zeros(input.rows(), d);
    let mut xhat = vec![0.0; d];
    let mut gx = vec![0.0; d];
    for i in 0..input.rows() {
        let (mu, sd) = (stats.mean[i], stats.std[i]);
        let inv = 1.0 / sd;
        let src = input.row(i);
        let go = grad_out.row(i);
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for k in 0..d {
            xhat[k] = (src[k] - mu) * inv;
            gx[k] = go[k] * alpha[k];
            mean_g += gx[k];
            mean_gx += gx[k] * xhat[k];
        }
        mean_g /= df;
        mean_gx /= df;
        for (k, g) in grad_in.row_mut(i).iter_mut().enumerate() {
            *g = inv * (gx[k] - mean_g - xhat[k] * mean_gx);
        }
    }
    grad_in
}

/// Row softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of a row softmax: `dA = S ⊙ (dS − rowsum(dS ⊙ S))`.
pub fn softmax_rows_backward(probs: &Matrix, grad_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let s = probs.row(i);
        let g = grad_probs.row(i);
        let inner: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = s[k] * (g[k] - inner);
        }
    }
    out
}

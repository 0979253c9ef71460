//! Reverse-mode gradients w.r.t. the prompts and the current head.
//!
//! The frozen backbone has no gradient slots at all: the backward pass only
//! propagates through it.

use super::forward::{forward_layers, gelu_grad, head_logits, norm, LayerCache};
use super::{BackboneModel, LayerParams, TokenMatrix};
use crate::error::{contract, Error, Result};
use crate::ln_constraint::{ln_drift_loss, PromptDistributionTarget};
use crate::numeric::{layer_norm_backward, softmax_rows_backward, Matrix};

/// One labelled image, already embedded. `label` is the global class id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tokens: TokenMatrix,
    pub label: usize,
}

/// Which logits enter the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitScope {
    /// Only the head being trained, with task-local labels.
    Current,
    /// Every head up to and including the trained one.
    Seen,
}

/// Loss assembly for one training step.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    /// Index of the head receiving gradients.
    pub head: usize,
    pub scope: LogitScope,
    /// Prompt-distribution target; `None` disables the drift penalty.
    pub ln_target: Option<&'a PromptDistributionTarget>,
    pub ln_coeff: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Mean cross-entropy plus the weighted drift penalty.
    pub loss: f64,
    pub ce_loss: f64,
    pub ln_loss: f64,
    /// One `M × D` gradient per layer.
    pub prompts: Vec<Matrix>,
    /// Gradient of the trained head's `D × classes` weights.
    pub head: Matrix,
}

/// Exact gradients of the batch loss w.r.t. every prompt matrix and the
/// trained head. Samples are reduced in batch order.
pub fn prompt_gradients(
    batch: &[Sample],
    model: &BackboneModel,
    spec: &LossSpec<'_>,
) -> Result<Gradients> {
    let head_idx = spec.head;
    let head = model
        .heads
        .get(head_idx)
        .ok_or_else(|| contract("prompt_gradients", format!("no head {head_idx}")))?;
    if batch.is_empty() {
        return Err(contract("prompt_gradients", "empty batch"));
    }
    let d = model.dims.dim;
    let mut grads: Vec<Matrix> = model
        .prompts
        .iter()
        .map(|p| Matrix::zeros(p.values.rows(), d))
        .collect();
    let mut head_grad = Matrix::zeros(d, head.classes());
    let inv_b = 1.0 / batch.len() as f64;
    let mut ce_total = 0.0;

    for sample in batch {
        let (h, caches) = forward_layers(&sample.tokens, model, false)?;
        let per_head = head_logits(model, &h);
        let (first_head, label) = scoped_label(model, spec, sample.label)?;
        let logits: Vec<f64> = per_head[first_head..=head_idx].concat();
        let (ce, dlogits) = cross_entropy(&logits, label);
        ce_total += ce;

        // Through the cosine heads to the class embedding.
        let tau = model.temperature;
        let h_norm = norm(&h);
        let h_hat: Vec<f64> = h.iter().map(|v| v / h_norm).collect();
        let mut dh_hat = vec![0.0; d];
        let mut offset = 0;
        for (hi, hd) in model.heads[first_head..=head_idx].iter().enumerate() {
            for c in 0..hd.classes() {
                let g = dlogits[offset + c] * inv_b;
                if g == 0.0 {
                    continue;
                }
                let w = hd.weights.col(c);
                let w_norm = norm(&w);
                let w_hat: Vec<f64> = w.iter().map(|v| v / w_norm).collect();
                for k in 0..d {
                    dh_hat[k] += tau * g * w_hat[k];
                }
                if first_head + hi == head_idx {
                    let dw_hat: Vec<f64> = h_hat.iter().map(|v| tau * g * v).collect();
                    let proj: f64 = w_hat.iter().zip(&dw_hat).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        head_grad[(k, c)] += (dw_hat[k] - w_hat[k] * proj) / w_norm;
                    }
                }
            }
            offset += hd.classes();
        }
        let proj: f64 = h_hat.iter().zip(&dh_hat).map(|(a, b)| a * b).sum();
        let mut dx = Matrix::zeros(model.dims.tokens(), d);
        for k in 0..d {
            dx[(0, k)] = (dh_hat[k] - h_hat[k] * proj) / h_norm;
        }

        for (l, cache) in caches.iter().enumerate().rev() {
            let (gx, gp) = layer_backward(cache, &model.layers[l], &dx)?;
            grads[l].add_assign(&gp)?;
            dx = gx;
        }
    }

    let ce_loss = ce_total * inv_b;
    let mut ln_loss = 0.0;
    if let Some(target) = spec.ln_target {
        if target.per_layer.len() != model.prompts.len() {
            return Err(contract("prompt_gradients", "drift target layer count"));
        }
        for (l, (p, t)) in model.prompts.iter().zip(&target.per_layer).enumerate() {
            let (loss, g) = ln_drift_loss(&p.values, t, model.ln_eps)?;
            ln_loss += loss;
            grads[l].axpy(spec.ln_coeff, &g)?;
        }
    }
    let loss = ce_loss + spec.ln_coeff * ln_loss;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            task: head_idx,
            step: 0,
            detail: format!("non-finite loss {loss}"),
        });
    }
    Ok(Gradients {
        loss,
        ce_loss,
        ln_loss,
        prompts: grads,
        head: head_grad,
    })
}

/// The loss `prompt_gradients` differentiates, computed by forward passes
/// only.
pub fn batch_loss(batch: &[Sample], model: &BackboneModel, spec: &LossSpec<'_>) -> Result<f64> {
    let mut ce = 0.0;
    for sample in batch {
        let (h, _) = forward_layers(&sample.tokens, model, false)?;
        let per_head = head_logits(model, &h);
        let (first_head, label) = scoped_label(model, spec, sample.label)?;
        let logits = per_head[first_head..=spec.head].concat();
        ce += cross_entropy(&logits, label).0;
    }
    let mut loss = ce / batch.len() as f64;
    if let Some(target) = spec.ln_target {
        for (p, t) in model.prompts.iter().zip(&target.per_layer) {
            loss += spec.ln_coeff * ln_drift_loss(&p.values, t, model.ln_eps)?.0;
        }
    }
    Ok(loss)
}

/// First head in scope and the label index within the scoped logits.
fn scoped_label(
    model: &BackboneModel,
    spec: &LossSpec<'_>,
    label: usize,
) -> Result<(usize, usize)> {
    let head = &model.heads[spec.head];
    let (first, offset) = match spec.scope {
        LogitScope::Current => (spec.head, head.first_class),
        LogitScope::Seen => (0, 0),
    };
    let end = head.first_class + head.classes();
    if label < offset || label >= end {
        return Err(contract(
            "prompt_gradients",
            format!("label {label} outside classes {offset}..{end}"),
        ));
    }
    Ok((first, label - offset))
}

/// `−log softmax(z)[y]` and its gradient `softmax(z) − e_y`.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_z).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Backward of one layer: gradient w.r.t. its input tokens and prompts.
pub(crate) fn layer_backward(
    cache: &LayerCache,
    params: &LayerParams,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let n = grad_out.rows();
    let m = cache.z.rows() - n;
    let dim = params.dim();
    let hd = params.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch.
    let mut d_hidden = grad_out.matmul_t(&params.mlp_w2)?;
    for (g, &pre) in d_hidden
        .as_mut_slice()
        .iter_mut()
        .zip(cache.hidden_pre.as_slice())
    {
        *g *= gelu_grad(pre);
    }
    let d_ln2 = d_hidden.matmul_t(&params.mlp_w1)?;
    let mut d_post = grad_out.clone();
    d_post.add_assign(&layer_norm_backward(
        &cache.post_attn,
        &cache.ln2_stats,
        &params.ln2_alpha,
        &d_ln2,
    ))?;

    // Attention branch: F = concat_h softmax(Q_h K_hᵀ / √d) V_h.
    let mut dq = Matrix::zeros(n, dim);
    let mut dk = Matrix::zeros(n + m, dim);
    let mut dv = Matrix::zeros(n + m, dim);
    for (h, head) in cache.trace.heads.iter().enumerate() {
        let df = d_post.col_block(h * hd, hd);
        let ds = df.matmul_t(&head.v_z)?;
        dv.set_col_block(h * hd, &head.scores.t_matmul(&df)?);
        let mut da = softmax_rows_backward(&head.scores, &ds);
        da.scale_in_place(scale);
        dq.set_col_block(h * hd, &da.matmul(&head.k_z)?);
        dk.set_col_block(h * hd, &da.t_matmul(&head.q_x)?);
    }
    let mut d_normed = dk.matmul_t(&params.w_k)?;
    d_normed.add_assign(&dv.matmul_t(&params.w_v)?)?;
    let dq_in = dq.matmul_t(&params.w_q)?;
    for i in 0..n {
        for (a, b) in d_normed.row_mut(i).iter_mut().zip(dq_in.row(i)) {
            *a += b;
        }
    }

    let d_z = layer_norm_backward(&cache.z, &cache.z_stats, &params.ln1_alpha, &d_normed);
    let mut dx = d_post;
    dx.add_assign(&d_z.row_block(0, n))?;
    let dp = if cache.ln_bypass {
        d_normed.row_block(n, m)
    } else {
        d_z.row_block(n, m)
    };
    Ok((dx, dp))
}

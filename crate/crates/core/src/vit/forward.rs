//! Forward propagation of prompted layers.
//!
//! Per layer: `Z = [X; P]` → LN1 → per-head q/k/v (image queries only) →
//! affinity → row softmax → aggregation → head concat → residual → LN2 →
//! GELU MLP → residual. Output prompts are never formed; the next layer gets
//! its own prompts.

use super::{BackboneModel, LayerParams, PromptMatrix, TokenMatrix};
use crate::error::{contract, Result};
use crate::numeric::{layer_norm, row_stats, softmax_rows, Matrix, RowStats};

/// Options for a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardMode {
    /// Return the attention traces.
    pub capture: bool,
    /// Route prompts around LN1 unchanged. Only used to check the
    /// self-attention consistency chain in isolation; never in training.
    pub ln_bypass: bool,
}

impl ForwardMode {
    pub fn capture() -> Self {
        Self {
            capture: true,
            ln_bypass: false,
        }
    }
}

/// Outputs of the q/k/v transforms. Queries exist for image tokens only.
#[derive(Debug, Clone)]
pub struct Qkv {
    /// `N × D`.
    pub q_x: Matrix,
    /// `(N+M) × D`.
    pub k_z: Matrix,
    /// `(N+M) × D`.
    pub v_z: Matrix,
    pub heads: usize,
}

impl Qkv {
    pub fn head_dim(&self) -> usize {
        self.q_x.cols() / self.heads
    }

    /// `(Q_X, K_Z, V_Z)` restricted to head `h`.
    pub fn head(&self, h: usize) -> (Matrix, Matrix, Matrix) {
        let d = self.head_dim();
        (
            self.q_x.col_block(h * d, d),
            self.k_z.col_block(h * d, d),
            self.v_z.col_block(h * d, d),
        )
    }
}

/// `Q = normed·W_q + b_q` (image rows only), likewise K and V over all rows.
pub fn qkv_transform(normed: &Matrix, params: &LayerParams, image_tokens: usize) -> Result<Qkv> {
    let d = params.dim();
    if normed.cols() != d {
        return Err(contract(
            "qkv_transform",
            format!("{} columns, layer width {d}", normed.cols()),
        ));
    }
    if image_tokens > normed.rows() {
        return Err(contract(
            "qkv_transform",
            format!("{image_tokens} image tokens in {} rows", normed.rows()),
        ));
    }
    let mut q_x = normed.row_block(0, image_tokens).matmul(&params.w_q)?;
    q_x.add_row_vector(&params.b_q)?;
    let mut k_z = normed.matmul(&params.w_k)?;
    k_z.add_row_vector(&params.b_k)?;
    let mut v_z = normed.matmul(&params.w_v)?;
    v_z.add_row_vector(&params.b_v)?;
    Ok(Qkv {
        q_x,
        k_z,
        v_z,
        heads: params.heads,
    })
}

/// `A = Q_X K_Zᵀ / √d` with `d` the head width.
pub fn affinity(q_x: &Matrix, k_z: &Matrix) -> Result<Matrix> {
    let d = q_x.cols();
    if k_z.cols() != d {
        return Err(contract(
            "affinity",
            format!("query width {d}, key width {}", k_z.cols()),
        ));
    }
    let mut a = q_x.matmul_t(k_z)?;
    if d > 0 {
        a.scale_in_place(1.0 / (d as f64).sqrt());
    }
    Ok(a)
}

/// `F = S_Z V_Z = S_X V_X + S_P V_P`.
pub fn aggregate(scores: &Matrix, v_z: &Matrix) -> Result<Matrix> {
    scores.matmul(v_z)
}

/// What one head computed for the image queries.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// `N × d`.
    pub q_x: Matrix,
    /// `(N+M) × d`.
    pub k_z: Matrix,
    /// `(N+M) × d`.
    pub v_z: Matrix,
    /// `N × (N+M)`.
    pub affinity: Matrix,
    /// Row softmax of `affinity`, `[S_X S_P]`.
    pub scores: Matrix,
}

impl HeadTrace {
    pub fn image_tokens(&self) -> usize {
        self.q_x.rows()
    }

    pub fn s_x(&self) -> Matrix {
        self.scores.col_block(0, self.image_tokens())
    }

    pub fn s_p(&self) -> Matrix {
        let n = self.image_tokens();
        self.scores.col_block(n, self.scores.cols() - n)
    }
}

/// Per-layer capture of the attention internals.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub heads: Vec<HeadTrace>,
    /// Head-concatenated attention output, `N × D`.
    pub f_z: Matrix,
    /// Statistics LN1 used for the prompt rows.
    pub prompt_stats: RowStats,
    /// All-head queries `N × D` (bias included).
    pub q_x: Matrix,
}

/// Everything the backward pass needs from one layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub trace: AttentionTrace,
    pub(crate) z: Matrix,
    pub(crate) z_stats: RowStats,
    pub(crate) post_attn: Matrix,
    pub(crate) ln2_stats: RowStats,
    pub(crate) hidden_pre: Matrix,
    pub(crate) ln_bypass: bool,
}

/// One prompted layer. Returns the `N × D` output tokens and, when
/// `mode.capture` is set, the attention trace.
pub fn layer_forward(
    x: &TokenMatrix,
    p: &PromptMatrix,
    params: &LayerParams,
    mode: ForwardMode,
) -> Result<(TokenMatrix, Option<AttentionTrace>)> {
    let (out, cache) = layer_forward_cached(&x.values, &p.values, params, mode.ln_bypass)?;
    let trace = mode.capture.then_some(cache.trace);
    Ok((TokenMatrix { values: out }, trace))
}

pub(crate) fn layer_forward_cached(
    x: &Matrix,
    p: &Matrix,
    params: &LayerParams,
    ln_bypass: bool,
) -> Result<(Matrix, LayerCache)> {
    let dim = params.dim();
    if x.cols() != dim || p.cols() != dim {
        return Err(contract(
            "layer_forward",
            format!(
                "tokens {:?}, prompts {:?}, width {dim}",
                x.shape(),
                p.shape()
            ),
        ));
    }
    let n = x.rows();
    let z = x.vstack(p)?;
    let (mut normed, z_stats) = layer_norm(&z, &params.ln1_alpha, &params.ln1_beta, params.ln_eps)?;
    if ln_bypass {
        for i in 0..p.rows() {
            normed.row_mut(n + i).copy_from_slice(p.row(i));
        }
    }
    let prompt_stats = RowStats {
        mean: z_stats.mean[n..].to_vec(),
        std: z_stats.std[n..].to_vec(),
    };

    let qkv = qkv_transform(&normed, params, n)?;
    let hd = qkv.head_dim();
    let mut f_z = Matrix::zeros(n, dim);
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (q, k, v) = qkv.head(h);
        let a = affinity(&q, &k)?;
        let s = softmax_rows(&a);
        let f = aggregate(&s, &v)?;
        f_z.set_col_block(h * hd, &f);
        heads.push(HeadTrace {
            q_x: q,
            k_z: k,
            v_z: v,
            affinity: a,
            scores: s,
        });
    }

    let post_attn = x.add(&f_z)?;
    let (ln2_out, ln2_stats) = layer_norm(
        &post_attn,
        &params.ln2_alpha,
        &params.ln2_beta,
        params.ln_eps,
    )?;
    let mut hidden_pre = ln2_out.matmul(&params.mlp_w1)?;
    hidden_pre.add_row_vector(&params.mlp_b1)?;
    let hidden = hidden_pre.map(gelu);
    let mut mlp_out = hidden.matmul(&params.mlp_w2)?;
    mlp_out.add_row_vector(&params.mlp_b2)?;
    let out = post_attn.add(&mlp_out)?;

    let cache = LayerCache {
        trace: AttentionTrace {
            heads,
            f_z,
            prompt_stats,
            q_x: qkv.q_x,
        },
        z,
        z_stats,
        post_attn,
        ln2_stats,
        hidden_pre,
        ln_bypass,
    };
    Ok((out, cache))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Result of a full model pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Logits of every class seen so far, heads concatenated in task order.
    pub logits: Vec<f64>,
    /// Final-layer class token.
    pub class_embedding: Vec<f64>,
    /// One per layer when capture was requested, otherwise empty.
    pub traces: Vec<AttentionTrace>,
}

/// Stacks the layers with fresh prompts per layer and applies all heads to
/// the final class token.
pub fn model_forward(
    tokens: &TokenMatrix,
    model: &BackboneModel,
    mode: ForwardMode,
) -> Result<ModelOutput> {
    if model.heads.is_empty() {
        return Err(contract("model_forward", "no classifier heads yet"));
    }
    let (class_embedding, caches) = forward_layers(tokens, model, mode.ln_bypass)?;
    let logits = head_logits(model, &class_embedding).concat();
    let traces = if mode.capture {
        caches.into_iter().map(|c| c.trace).collect()
    } else {
        Vec::new()
    };
    Ok(ModelOutput {
        logits,
        class_embedding,
        traces,
    })
}

pub(crate) fn forward_layers(
    tokens: &TokenMatrix,
    model: &BackboneModel,
    ln_bypass: bool,
) -> Result<(Vec<f64>, Vec<LayerCache>)> {
    let mut x = tokens.values.clone();
    let mut caches = Vec::with_capacity(model.layers.len());
    for (params, prompt) in model.layers.iter().zip(&model.prompts) {
        let (out, cache) = layer_forward_cached(&x, &prompt.values, params, ln_bypass)?;
        caches.push(cache);
        x = out;
    }
    Ok((x.row(0).to_vec(), caches))
}

/// Per-head cosine logits `τ · cos(h, w_c)`.
pub(crate) fn head_logits(model: &BackboneModel, class_embedding: &[f64]) -> Vec<Vec<f64>> {
    let h_norm = norm(class_embedding);
    model
        .heads
        .iter()
        .map(|head| {
            (0..head.classes())
                .map(|c| {
                    let w = head.weights.col(c);
                    let dot: f64 = w.iter().zip(class_embedding).map(|(a, b)| a * b).sum();
                    model.temperature * dot / (h_norm * norm(&w)).max(f64::MIN_POSITIVE)
                })
                .collect()
        })
        .collect()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Prompt row statistics as LN1 of each layer would compute them.
pub fn prompt_stats(model: &BackboneModel) -> Vec<RowStats> {
    model
        .prompts
        .iter()
        .map(|p| row_stats(&p.values, model.ln_eps))
        .collect()
}

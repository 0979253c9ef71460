//! Extraction of the per-layer matrices whose null spaces the projector
//! targets: `J₁` stacks `Q_{X,h} W_{k,h}ᵀ` and `J₂` stacks `S_{P,h}` over
//! heads and then over samples.

use super::forward::forward_layers;
use super::{BackboneModel, TokenMatrix};
use crate::error::Result;
use crate::numeric::Matrix;

/// Rows collected for one layer.
#[derive(Debug, Clone)]
pub struct ProjectionInputs {
    /// `(samples · H · N) × D`.
    pub j1: Matrix,
    /// `(samples · H · N) × M`.
    pub j2: Matrix,
    /// Raw image tokens entering the layer, `(samples · N) × D`; the input
    /// of the simplified `X ΔPᵀ = 0` baseline.
    pub tokens: Matrix,
}

impl ProjectionInputs {
    fn empty(dim: usize, prompts: usize) -> Self {
        Self {
            j1: Matrix::zeros(0, dim),
            j2: Matrix::zeros(0, prompts),
            tokens: Matrix::zeros(0, dim),
        }
    }
}

/// Runs every sample through the model and stacks its per-head blocks.
/// An empty sample list yields empty (0-row) matrices.
pub fn collect_projection_inputs(
    samples: &[TokenMatrix],
    model: &BackboneModel,
) -> Result<Vec<ProjectionInputs>> {
    let dims = &model.dims;
    let hd = dims.head_dim();
    let w_k_heads: Vec<Vec<Matrix>> = model
        .layers
        .iter()
        .map(|p| (0..p.heads).map(|h| p.w_k.col_block(h * hd, hd)).collect())
        .collect();
    let mut out: Vec<ProjectionInputs> = (0..dims.layers)
        .map(|_| ProjectionInputs::empty(dims.dim, dims.prompts))
        .collect();
    for tokens in samples {
        let (_, caches) = forward_layers(tokens, model, false)?;
        for (l, cache) in caches.iter().enumerate() {
            let n = cache.trace.q_x.rows();
            let dst = &mut out[l];
            for (head, w_k) in cache.trace.heads.iter().zip(&w_k_heads[l]) {
                dst.j1.append_rows(&head.q_x.matmul_t(w_k)?)?;
                dst.j2.append_rows(&head.s_p())?;
            }
            dst.tokens.append_rows(&cache.z.row_block(0, n))?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::ForwardMode;
    use super::super::{layer_forward, model_forward};
    use super::*;

    #[test]
    fn single_head_single_sample_is_qx_wk_t() {
        let mut model = tiny_model(6);
        for layer in &mut model.layers {
            layer.heads = 1;
        }
        model.dims.heads = 1;
        let x = model.embed(&tiny_image(2)).unwrap();
        let j = collect_projection_inputs(&[x.clone()], &model).unwrap();
        let out = model_forward(&x, &model, ForwardMode::capture()).unwrap();
        let q = &out.traces[0].q_x;
        let want = q.matmul_t(&model.layers[0].w_k).unwrap();
        assert_eq!(j[0].j1, want);
        assert_eq!(j[0].j2, out.traces[0].heads[0].s_p());
    }

    #[test]
    fn per_head_blocks_and_concatenation() {
        let model = tiny_model(6);
        let (n, dim, hd) = (model.dims.tokens(), model.dims.dim, model.dims.head_dim());
        let a = model.embed(&tiny_image(2)).unwrap();
        let b = model.embed(&tiny_image(3)).unwrap();
        let one = collect_projection_inputs(&[a.clone()], &model).unwrap();
        let two = collect_projection_inputs(&[a.clone(), b], &model).unwrap();
        assert_eq!(one[0].j1.shape(), (2 * n, dim));
        assert_eq!(two[1].j1.rows(), 2 * one[1].j1.rows());
        assert_eq!(two[1].j1.row_block(0, 2 * n), one[1].j1);
        assert_eq!(two[1].j2.row_block(0, 2 * n), one[1].j2);

        // Recompute head 1 of layer 0 by hand from the layer trace.
        let (_, trace) = layer_forward(
            &a,
            &model.prompts[0],
            &model.layers[0],
            ForwardMode::capture(),
        )
        .unwrap();
        let trace = trace.unwrap();
        let q1 = trace.q_x.col_block(hd, hd);
        let wk1 = model.layers[0].w_k.col_block(hd, hd);
        let mut want = Matrix::zeros(n, dim);
        for i in 0..n {
            for c in 0..dim {
                want[(i, c)] = (0..hd).map(|k| q1[(i, k)] * wk1[(c, k)]).sum();
            }
        }
        assert!(one[0].j1.row_block(n, n).max_abs_diff(&want) < 1e-13);
    }

    #[test]
    fn empty_dataset_gives_empty_matrices() {
        let model = tiny_model(1);
        let j = collect_projection_inputs(&[], &model).unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!(j[0].j1.shape(), (0, 8));
        assert_eq!(j[0].j2.shape(), (0, 2));
    }
}

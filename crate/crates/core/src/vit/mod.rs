//! A small VPT-Deep transformer: frozen backbone, one trainable prompt
//! matrix per layer, per-task cosine classifier heads.

mod backward;
mod collect;
mod forward;

pub use backward::{batch_loss, prompt_gradients, Gradients, LogitScope, LossSpec, Sample};
pub use collect::{collect_projection_inputs, ProjectionInputs};
pub use forward::{
    affinity, aggregate, layer_forward, model_forward, prompt_stats, qkv_transform, AttentionTrace,
    ForwardMode, HeadTrace, LayerCache, ModelOutput, Qkv,
};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::numeric::Matrix;
use crate::rng::{normal_vec, SeedStream};

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub prompts: usize,
    pub mlp_ratio: usize,
}

impl ModelDims {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Pixels per patch (single channel).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Image tokens including the class token.
    pub fn tokens(&self) -> usize {
        1 + self.patches_per_side() * self.patches_per_side()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(contract("ModelDims", why));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.prompts == 0 {
            return bad("at least one prompt per layer is required".into());
        }
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Frozen weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub ln1_alpha: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_alpha: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
    pub heads: usize,
    pub ln_eps: f64,
}

impl LayerParams {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn random(dims: &ModelDims, ln_eps: f64, stream: SeedStream) -> Self {
        let d = dims.dim;
        let ff = d * dims.mlp_ratio;
        let small =
            |name: &str, n: usize, std: f64| normal_vec(&mut stream.child(name).rng(), n, std);
        let around_one = |name: &str| {
            small(name, d, 0.1)
                .into_iter()
                .map(|v| 1.0 + v)
                .collect::<Vec<_>>()
        };
        Self {
            w_q: random_orthogonal(d, stream.child("w_q")),
            w_k: random_orthogonal(d, stream.child("w_k")),
            w_v: random_orthogonal(d, stream.child("w_v")),
            b_q: small("b_q", d, 0.1),
            b_k: small("b_k", d, 0.1),
            b_v: small("b_v", d, 0.1),
            ln1_alpha: around_one("ln1_alpha"),
            ln1_beta: small("ln1_beta", d, 0.05),
            ln2_alpha: around_one("ln2_alpha"),
            ln2_beta: small("ln2_beta", d, 0.05),
            mlp_w1: gaussian(d, ff, (1.0 / d as f64).sqrt(), stream.child("mlp_w1")),
            mlp_b1: small("mlp_b1", ff, 0.02),
            mlp_w2: gaussian(
                ff,
                d,
                0.5 * (1.0 / ff as f64).sqrt(),
                stream.child("mlp_w2"),
            ),
            mlp_b2: small("mlp_b2", d, 0.02),
            heads: dims.heads,
            ln_eps,
        }
    }

    fn hash_into(&self, h: &mut Sha256) {
        for m in [&self.w_q, &self.w_k, &self.w_v, &self.mlp_w1, &self.mlp_w2] {
            hash_slice(h, m.as_slice());
        }
        for v in [
            &self.b_q,
            &self.b_k,
            &self.b_v,
            &self.ln1_alpha,
            &self.ln1_beta,
            &self.ln2_alpha,
            &self.ln2_beta,
            &self.mlp_b1,
            &self.mlp_b2,
        ] {
            hash_slice(h, v);
        }
        h.update((self.heads as u64).to_le_bytes());
        h.update(self.ln_eps.to_bits().to_le_bytes());
    }
}

/// Trainable prompts inserted at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    pub values: Matrix,
    pub layer_index: usize,
}

/// Image tokens of one layer; row 0 is the class token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub values: Matrix,
}

/// A cosine classifier for the classes of one task: `logit_c = τ · cos(h, w_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `D × classes`, one weight column per class.
    pub weights: Matrix,
    pub first_class: usize,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.weights.cols()
    }
}

/// The whole model: frozen embedding and layers, prompts, and heads.
#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub dims: ModelDims,
    /// `patch_dim × D`.
    pub patch_embedding: Matrix,
    pub class_token: Vec<f64>,
    /// `N × D`, added to the embedded tokens.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub prompts: Vec<PromptMatrix>,
    pub heads: Vec<ClassifierHead>,
    pub temperature: f64,
    pub ln_eps: f64,
}

impl BackboneModel {
    /// Random frozen backbone with freshly initialized prompts and no heads.
    pub fn init(dims: ModelDims, temperature: f64, ln_eps: f64, seed: SeedStream) -> Result<Self> {
        dims.validate()?;
        let d = dims.dim;
        let backbone = seed.child("backbone");
        let layers = (0..dims.layers)
            .map(|l| LayerParams::random(&dims, ln_eps, backbone.child("layer").index(l as u64)))
            .collect();
        let prompts = (0..dims.layers)
            .map(|l| PromptMatrix {
                values: gaussian(dims.prompts, d, 1.0, seed.child("prompts").index(l as u64)),
                layer_index: l,
            })
            .collect();
        Ok(Self {
            dims,
            patch_embedding: gaussian(
                dims.patch_dim(),
                d,
                (1.0 / dims.patch_dim() as f64).sqrt(),
                backbone.child("patch_embedding"),
            ),
            class_token: normal_vec(&mut backbone.child("class_token").rng(), d, 0.02),
            position_embedding: gaussian(dims.tokens(), d, 0.02, backbone.child("position")),
            layers,
            prompts,
            heads: Vec::new(),
            temperature,
            ln_eps,
        })
    }

    /// Appends a head for `classes` new classes and returns its index.
    pub fn add_head(&mut self, classes: usize, seed: SeedStream) -> usize {
        let first_class = self.total_classes();
        let weights = gaussian(self.dims.dim, classes, 1.0, seed);
        self.heads.push(ClassifierHead {
            weights,
            first_class,
        });
        self.heads.len() - 1
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(ClassifierHead::classes).sum()
    }

    /// Splits an image (row-major pixels) into patches and embeds them.
    pub fn embed(&self, image: &[f64]) -> Result<TokenMatrix> {
        let dims = &self.dims;
        let side = dims.image_size;
        if image.len() != side * side {
            return Err(contract(
                "embed",
                format!("{} pixels for a {side}x{side} image", image.len()),
            ));
        }
        let per_side = dims.patches_per_side();
        let ps = dims.patch_size;
        let patches = Matrix::from_fn(per_side * per_side, dims.patch_dim(), |p, k| {
            let (pr, pc) = (p / per_side, p % per_side);
            let (r, c) = (k / ps, k % ps);
            image[(pr * ps + r) * side + pc * ps + c]
        });
        let embedded = patches.matmul(&self.patch_embedding)?;
        let mut tokens = Matrix::zeros(dims.tokens(), dims.dim);
        tokens.row_mut(0).copy_from_slice(&self.class_token);
        for i in 0..embedded.rows() {
            tokens.row_mut(i + 1).copy_from_slice(embedded.row(i));
        }
        tokens.add_assign(&self.position_embedding)?;
        Ok(TokenMatrix { values: tokens })
    }

    /// SHA-256 over every frozen tensor (embeddings and layer weights).
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        hash_slice(&mut h, self.patch_embedding.as_slice());
        hash_slice(&mut h, &self.class_token);
        hash_slice(&mut h, self.position_embedding.as_slice());
        for layer in &self.layers {
            layer.hash_into(&mut h);
        }
        h.finalize().into()
    }
}

fn hash_slice(h: &mut Sha256, values: &[f64]) {
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, stream: SeedStream) -> Matrix {
    let data = normal_vec(&mut stream.rng(), rows * cols, std);
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian draw.
fn random_orthogonal(n: usize, stream: SeedStream) -> Matrix {
    let mut rng = stream.rng();
    loop {
        let g = gaussian(n, n, 1.0, stream.index(rng.gen()));
        let mut q = Matrix::zeros(n, n);
        let mut ok = true;
        for j in 0..n {
            let mut v = g.col(j);
            for k in 0..j {
                let qk = q.col(k);
                let proj: f64 = v.iter().zip(&qk).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(&qk) {
                    *vi -= proj * qi;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..n {
                q[(i, j)] = v[i] / norm;
            }
        }
        if ok {
            return q;
        }
    }
}

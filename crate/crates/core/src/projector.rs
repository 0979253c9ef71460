//! Null-space projection of prompt updates.
//!
//! Per layer two uncentered covariances are accumulated across tasks:
//! `C₁ = Σ J₁ᵀJ₁` (D×D, from `Q_X W_kᵀ`) and `C₂ = Σ J₂ᵀJ₂` (M×M, from
//! `S_P`). Their (approximate) null spaces give `B₁` and `B₂`, and a
//! candidate update `P_G` becomes `ΔP = B₂ P_G B₁`.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::numeric::{eig_sym_psd, Matrix, Spectrum};
use crate::vit::ProjectionInputs;

/// How many trailing singular directions count as the null space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NullityMode {
    /// Position of the largest second difference of the descending spectrum.
    Adaptive,
    /// Every value within `γ ×` the smallest one.
    Gamma(f64),
    /// Numerically zero values only: `λ ≤ 1e-10 · max(λ_max, 1)`.
    ExactZero,
}

impl fmt::Display for NullityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NullityMode::Adaptive => write!(f, "adaptive"),
            NullityMode::Gamma(g) => write!(f, "gamma:{g}"),
            NullityMode::ExactZero => write!(f, "exact"),
        }
    }
}

impl FromStr for NullityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(NullityMode::Adaptive),
            "exact" => Ok(NullityMode::ExactZero),
            _ => {
                let g = s
                    .strip_prefix("gamma:")
                    .and_then(|g| g.parse::<f64>().ok())
                    .filter(|g| *g >= 1.0)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "nullity mode `{s}`; expected adaptive, exact or gamma:<γ ≥ 1>"
                        ))
                    })?;
                Ok(NullityMode::Gamma(g))
            }
        }
    }
}

/// `C + JᵀJ`.
pub fn accumulate_covariance(c: &Matrix, j: &Matrix) -> Result<Matrix> {
    if c.rows() != c.cols() || (j.rows() > 0 && j.cols() != c.cols()) {
        return Err(contract(
            "accumulate_covariance",
            format!("C {:?}, J {:?}", c.shape(), j.shape()),
        ));
    }
    if j.rows() == 0 {
        return Ok(c.clone());
    }
    c.add(&j.gram())
}

/// `λ ≤ 1e-10 · max(λ_max, 1)`.
pub fn exact_zero_nullity(lambda: &[f64]) -> usize {
    let max = lambda.first().copied().unwrap_or(0.0);
    let tol = 1e-10 * max.max(1.0);
    lambda.iter().filter(|&&l| l <= tol).count()
}

/// `R = dim − argmax_j (λ_{j−1} − 2λ_j + λ_{j+1})` over `j = 2..dim−1`
/// (1-based), ties to the smallest `j`. Spectra shorter than three fall
/// back to counting values `≤ 1e-10 · λ_max`.
pub fn adaptive_nullity(lambda: &[f64]) -> usize {
    let dim = lambda.len();
    if dim < 3 {
        let tol = 1e-10 * lambda.first().copied().unwrap_or(0.0);
        return lambda.iter().filter(|&&l| l <= tol).count();
    }
    let mut best_j = 2;
    let mut best = f64::NEG_INFINITY;
    for j in 2..dim {
        // 1-based j ↦ 0-based j − 1.
        let v = lambda[j - 2] - 2.0 * lambda[j - 1] + lambda[j];
        if v > best {
            best = v;
            best_j = j;
        }
    }
    dim - best_j
}

/// Count of `λ ≤ γ · λ_min`; exact zeros only when `λ_min = 0`.
pub fn gamma_nullity(lambda: &[f64], gamma: f64) -> usize {
    let Some(&min) = lambda.last() else {
        return 0;
    };
    if min == 0.0 {
        return lambda.iter().filter(|&&l| l == 0.0).count();
    }
    let threshold = gamma * min;
    lambda.iter().filter(|&&l| l <= threshold).count()
}

pub fn nullity(lambda: &[f64], mode: NullityMode) -> usize {
    match mode {
        NullityMode::Adaptive => adaptive_nullity(lambda),
        NullityMode::Gamma(g) => gamma_nullity(lambda, g),
        NullityMode::ExactZero => exact_zero_nullity(lambda),
    }
}

/// A projector together with the spectrum it was built from.
#[derive(Debug, Clone)]
pub struct BuiltProjector {
    pub matrix: Matrix,
    pub nullity: usize,
    pub spectrum: Spectrum,
}

/// `B = η · U₀U₀ᵀ / ‖U₀U₀ᵀ‖_F + (1 − η) I`, with `U₀` the eigenvectors of
/// the `R` smallest eigenvalues of `C`. For `R = 0` the first term is zero.
pub fn build_projector(c: &Matrix, mode: NullityMode, eta: f64) -> Result<BuiltProjector> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(contract("build_projector", format!("eta = {eta}")));
    }
    let spectrum = eig_sym_psd(c)?;
    let n = spectrum.dim();
    let r = nullity(&spectrum.singular_values, mode);
    let mut b = Matrix::identity(n).scale(1.0 - eta);
    if r > 0 {
        let u0 = spectrum.trailing_vectors(r);
        let raw = u0.matmul_t(&u0)?;
        let norm = raw.frobenius_norm();
        b.axpy(eta / norm, &raw)?;
    }
    Ok(BuiltProjector {
        matrix: b,
        nullity: r,
        spectrum,
    })
}

/// `ΔP = B₂ · P_G · B₁`.
pub fn project_update(p_g: &Matrix, b1: &Matrix, b2: &Matrix) -> Result<Matrix> {
    if b2.cols() != p_g.rows() || p_g.cols() != b1.rows() {
        return Err(contract(
            "project_update",
            format!(
                "B₂ {:?} · P_G {:?} · B₁ {:?}",
                b2.shape(),
                p_g.shape(),
                b1.shape()
            ),
        ));
    }
    b2.matmul(p_g)?.matmul(b1)
}

/// Projector for the simplified `X ΔPᵀ = 0` condition, built from the raw
/// token covariance `Σ XᵀX` with the same spectrum and nullity machinery.
pub fn pgp_projector(token_cov: &Matrix, mode: NullityMode, eta: f64) -> Result<BuiltProjector> {
    build_projector(token_cov, mode, eta)
}

/// `‖Ω x‖` for every row `x` of `rows`, stacked: with `C = ΩᵀΩ` this equals
/// `sqrt(Σ_i λ_i ‖rows · u_i‖²)`, a sum of non-negative terms.
pub fn spectral_residual(spectrum: &Spectrum, rows: &Matrix) -> f64 {
    let u = &spectrum.right_vectors;
    let mut total = 0.0;
    for (i, &lambda) in spectrum.singular_values.iter().enumerate() {
        if lambda == 0.0 {
            continue;
        }
        let mut sq = 0.0;
        for r in 0..rows.rows() {
            let p: f64 = rows
                .row(r)
                .iter()
                .enumerate()
                .map(|(k, v)| v * u[(k, i)])
                .sum();
            sq += p * p;
        }
        total += lambda * sq;
    }
    total.sqrt()
}

/// Which projection a method applies to its candidate updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    None,
    Both,
    B1Only,
    B2Only,
    Pgp,
}

/// Per-layer accumulated state.
#[derive(Debug, Clone)]
pub struct LayerProjector {
    pub c1: Matrix,
    pub c2: Matrix,
    /// `Σ XᵀX` of the raw tokens entering the layer.
    pub token_cov: Matrix,
    pub b1: Matrix,
    pub b2: Matrix,
    pub b_pgp: Matrix,
    pub r1: usize,
    pub r2: usize,
    pub r_pgp: usize,
    pub spectrum1: Option<Spectrum>,
    pub spectrum2: Option<Spectrum>,
}

impl LayerProjector {
    fn new(dim: usize, prompts: usize) -> Self {
        Self {
            c1: Matrix::zeros(dim, dim),
            c2: Matrix::zeros(prompts, prompts),
            token_cov: Matrix::zeros(dim, dim),
            b1: Matrix::identity(dim),
            b2: Matrix::identity(prompts),
            b_pgp: Matrix::identity(dim),
            r1: 0,
            r2: 0,
            r_pgp: 0,
            spectrum1: None,
            spectrum2: None,
        }
    }
}

/// One singular-value curve and the nullity chosen from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRecord {
    pub task: usize,
    pub layer: usize,
    pub matrix: &'static str,
    pub singular_values: Vec<f64>,
    pub nullity: usize,
}

/// Projector settings shared by all layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorConfig {
    pub mode: NullityMode,
    pub eta1: f64,
    pub eta2: f64,
}

/// Covariances and projectors of every layer. Projectors start at the
/// identity and are rebuilt after every task.
#[derive(Debug, Clone)]
pub struct ProjectorState {
    pub config: ProjectorConfig,
    pub layers: Vec<LayerProjector>,
}

impl ProjectorState {
    pub fn new(layers: usize, dim: usize, prompts: usize, config: ProjectorConfig) -> Self {
        Self {
            config,
            layers: (0..layers)
                .map(|_| LayerProjector::new(dim, prompts))
                .collect(),
        }
    }

    /// Adds one task's collected rows and rebuilds every projector.
    pub fn update(
        &mut self,
        task: usize,
        inputs: &[ProjectionInputs],
    ) -> Result<Vec<SpectrumRecord>> {
        if inputs.len() != self.layers.len() {
            return Err(contract(
                "ProjectorState::update",
                format!(
                    "{} layers of inputs for {} layers",
                    inputs.len(),
                    self.layers.len()
                ),
            ));
        }
        let cfg = self.config;
        let mut records = Vec::new();
        for (l, (state, inp)) in self.layers.iter_mut().zip(inputs).enumerate() {
            state.c1 = accumulate_covariance(&state.c1, &inp.j1)?;
            state.c2 = accumulate_covariance(&state.c2, &inp.j2)?;
            state.token_cov = accumulate_covariance(&state.token_cov, &inp.tokens)?;
            let p1 = build_projector(&state.c1, cfg.mode, cfg.eta1)?;
            let p2 = build_projector(&state.c2, cfg.mode, cfg.eta2)?;
            let pg = pgp_projector(&state.token_cov, cfg.mode, cfg.eta1)?;
            for (name, p) in [("C1", &p1), ("C2", &p2), ("PGP", &pg)] {
                records.push(SpectrumRecord {
                    task,
                    layer: l,
                    matrix: name,
                    singular_values: p.spectrum.singular_values.clone(),
                    nullity: p.nullity,
                });
            }
            state.b1 = p1.matrix;
            state.r1 = p1.nullity;
            state.spectrum1 = Some(p1.spectrum);
            state.b2 = p2.matrix;
            state.r2 = p2.nullity;
            state.spectrum2 = Some(p2.spectrum);
            state.b_pgp = pg.matrix;
            state.r_pgp = pg.nullity;
        }
        Ok(records)
    }

    /// Applies the method's projection to a layer's candidate update.
    pub fn project(&self, layer: usize, p_g: &Matrix, kind: ProjectionKind) -> Result<Matrix> {
        let s = &self.layers[layer];
        match kind {
            ProjectionKind::None => Ok(p_g.clone()),
            ProjectionKind::Both => project_update(p_g, &s.b1, &s.b2),
            ProjectionKind::B1Only => p_g.matmul(&s.b1),
            ProjectionKind::B2Only => s.b2.matmul(p_g),
            ProjectionKind::Pgp => p_g.matmul(&s.b_pgp),
        }
    }

    /// Relative condition residuals `‖Ω₁ΔPᵀ‖ / ((1+‖Ω₁‖)(1+‖ΔP‖))` and the
    /// same for `Ω₂ΔP`, evaluated through the accumulated covariances.
    pub fn relative_residuals(&self, layer: usize, dp: &Matrix) -> (f64, f64) {
        let s = &self.layers[layer];
        let dp_norm = dp.frobenius_norm();
        let rel = |spec: &Option<Spectrum>, c: &Matrix, rows: &Matrix| match spec {
            Some(spec) => {
                let omega_norm = c.trace().max(0.0).sqrt();
                spectral_residual(spec, rows) / ((1.0 + omega_norm) * (1.0 + dp_norm))
            }
            None => 0.0,
        };
        (
            rel(&s.spectrum1, &s.c1, dp),
            rel(&s.spectrum2, &s.c2, &dp.transpose()),
        )
    }
}

/// Relative residuals computed directly from stacked `Ω` matrices.
pub fn direct_relative_residuals(
    omega1: &Matrix,
    omega2: &Matrix,
    dp: &Matrix,
) -> Result<(f64, f64)> {
    let dp_norm = dp.frobenius_norm();
    let r1 = omega1.matmul_t(dp)?.frobenius_norm();
    let r2 = omega2.matmul(dp)?.frobenius_norm();
    Ok((
        r1 / ((1.0 + omega1.frobenius_norm()) * (1.0 + dp_norm)),
        r2 / ((1.0 + omega2.frobenius_norm()) * (1.0 + dp_norm)),
    ))
}

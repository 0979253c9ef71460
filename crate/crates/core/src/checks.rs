//! Property suite run by `nsp2 check`.
//!
//! Each property reports the worst measured value against a fixed
//! tolerance. A fault can be injected into the projector property to prove
//! that the suite notices a broken projector.

use crate::error::Result;
use crate::harness::{final_metrics, AccuracyMatrix};
use crate::ln_constraint::ln_shift_check;
use crate::ln_constraint::PromptDistributionTarget;
use crate::numeric::row_stats;
use crate::numeric::{eig_sym_psd, Matrix};
use crate::projector::{
    build_projector, direct_relative_residuals, exact_zero_nullity, project_update, NullityMode,
};
use crate::rng::{normal_vec, SeedStream};
use crate::vit::{
    batch_loss, layer_forward, prompt_gradients, BackboneModel, ForwardMode, LogitScope, LossSpec,
    ModelDims, PromptMatrix, Sample, TokenMatrix,
};

/// Deliberate breakage for self-testing the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Adds a rank-one term outside the null space to every `B₁`.
    PerturbB1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst value observed; compared with `tolerance`.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: None,
        }
    }
}

/// Runs every property.
pub fn run_checks(opts: CheckOptions) -> Result<Vec<CheckOutcome>> {
    let root = SeedStream::new(opts.seed).child("checks");
    Ok(vec![
        projector_residuals(root.child("projector"), 50, opts.fault)?,
        ln_shift_identity(root.child("ln_shift"), 100)?,
        ln_bypass_consistency(root.child("bypass"), 100)?,
        gradient_check(root.child("gradients"))?,
        metric_formulas(root.child("metrics"), 100)?,
    ])
}

fn gaussian(rows: usize, cols: usize, std: f64, s: SeedStream) -> Matrix {
    Matrix::from_vec(rows, cols, normal_vec(&mut s.rng(), rows * cols, std)).expect("sized")
}

/// η = 1 exact-zero projectors built from rank-deficient `Ω` matrices must
/// annihilate every projected update: worst relative `‖Ω₁ΔPᵀ‖`, `‖Ω₂ΔP‖`.
pub fn projector_residuals(
    seed: SeedStream,
    trials: usize,
    fault: Option<Fault>,
) -> Result<CheckOutcome> {
    let (d, m, rows) = (8, 6, 12);
    let mut worst: f64 = 0.0;
    let mut min_nullity = usize::MAX;
    for t in 0..trials {
        let s = seed.index(t as u64);
        let omega1 =
            gaussian(rows, 5, 1.0, s.child("a1")).matmul(&gaussian(5, d, 1.0, s.child("b1")))?;
        let omega2 =
            gaussian(rows, 3, 1.0, s.child("a2")).matmul(&gaussian(3, m, 1.0, s.child("b2")))?;
        let p1 = build_projector(&omega1.gram(), NullityMode::ExactZero, 1.0)?;
        let p2 = build_projector(&omega2.gram(), NullityMode::ExactZero, 1.0)?;
        min_nullity = min_nullity.min(p1.nullity.min(p2.nullity));
        let mut b1 = p1.matrix;
        if fault == Some(Fault::PerturbB1) {
            let u = normal_vec(&mut s.child("fault").rng(), d, 1.0);
            b1.add_assign(&Matrix::from_fn(d, d, |i, j| 1e-3 * u[i] * u[j]))?;
        }
        let p_g = gaussian(m, d, 1.0, s.child("grad"));
        let dp = project_update(&p_g, &b1, &p2.matrix)?;
        let (r1, r2) = direct_relative_residuals(&omega1, &omega2, &dp)?;
        worst = worst.max(r1).max(r2);
    }
    Ok(CheckOutcome::new(
        "projector_residual",
        worst,
        1e-8,
        format!("{trials} trials, smallest nullity {min_nullity}"),
    ))
}

/// A row-wise permutation keeps every row's mean and std, so the LayerNorm
/// of the shifted prompts must equal `LN(P) + (ΔP/σ)⊙α`.
pub fn ln_shift_identity(seed: SeedStream, trials: usize) -> Result<CheckOutcome> {
    let (m, d) = (4, 16);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let s = seed.index(t as u64);
        let p = gaussian(m, d, 1.5, s.child("p"));
        let alpha = normal_vec(&mut s.child("alpha").rng(), d, 1.0);
        let mut rng = s.child("perm").rng();
        let mut shifted = p.clone();
        for i in 0..m {
            use rand::seq::SliceRandom;
            shifted.row_mut(i).shuffle(&mut rng);
        }
        let dp = shifted.sub(&p)?;
        // Permuted sums can differ in the last ulp; that is not a drift.
        worst = worst.max(ln_shift_check(&p, &dp, &alpha, 1e-6).unwrap_or(f64::INFINITY));
    }
    Ok(CheckOutcome::new(
        "ln_shift_identity",
        worst,
        1e-10,
        format!("{trials} permuted prompt matrices"),
    ))
}

/// Null-space bases of `ΩᵀΩ` (columns), using the exact-zero rule.
fn null_basis(omega: &Matrix) -> Result<Matrix> {
    let spec = eig_sym_psd(&omega.gram())?;
    let r = exact_zero_nullity(&spec.singular_values);
    Ok(spec.trailing_vectors(r))
}

/// With prompts routed around LN1, any `ΔP` with `Ω₁ΔPᵀ = 0` and
/// `Ω₂ΔP = 0` must leave the attention output `F_Z` unchanged.
pub fn ln_bypass_consistency(seed: SeedStream, trials: usize) -> Result<CheckOutcome> {
    // One patch plus the class token keeps both Ω matrices short and wide,
    // so their null spaces are non-trivial.
    let dims = ModelDims {
        image_size: 4,
        patch_size: 4,
        dim: 8,
        heads: 2,
        layers: 1,
        prompts: 6,
        mlp_ratio: 2,
    };
    let mode = ForwardMode {
        capture: true,
        ln_bypass: true,
    };
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let s = seed.index(t as u64);
        let model = BackboneModel::init(dims, 10.0, 1e-6, s.child("model"))?;
        let params = &model.layers[0];
        let x = TokenMatrix {
            values: gaussian(dims.tokens(), dims.dim, 1.0, s.child("x")),
        };
        let p = PromptMatrix {
            values: gaussian(dims.prompts, dims.dim, 1.0, s.child("p")),
            layer_index: 0,
        };
        let (_, trace) = layer_forward(&x, &p, params, mode)?;
        let trace = trace.expect("captured");
        let hd = dims.head_dim();
        let mut omega1 = Matrix::zeros(0, dims.dim);
        let mut omega2 = Matrix::zeros(0, dims.prompts);
        for (h, head) in trace.heads.iter().enumerate() {
            omega1.append_rows(&head.q_x.matmul_t(&params.w_k.col_block(h * hd, hd))?)?;
            omega2.append_rows(&head.s_p())?;
        }
        let n1 = null_basis(&omega1)?;
        let n2 = null_basis(&omega2)?;
        let core = gaussian(n2.cols(), n1.cols(), 1.0, s.child("core"));
        let dp = n2.matmul(&core)?.matmul_t(&n1)?;
        let dp = dp.scale(p.values.frobenius_norm() / dp.frobenius_norm().max(f64::MIN_POSITIVE));
        let moved = PromptMatrix {
            values: p.values.add(&dp)?,
            layer_index: 0,
        };
        let (_, after) = layer_forward(&x, &moved, params, mode)?;
        let f0 = &trace.f_z;
        let f1 = &after.expect("captured").f_z;
        worst = worst.max(f1.sub(f0)?.frobenius_norm() / f0.frobenius_norm());
    }
    Ok(CheckOutcome::new(
        "ln_bypass_consistency",
        worst,
        1e-8,
        format!("{trials} random (X, P, dP) triples"),
    ))
}

/// Relative error used by the gradient check. Gradients below `1e-8` in
/// magnitude are compared on an absolute scale of `1e-8`.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central finite differences (step 1e-5) against the analytic gradients of
/// every prompt and head entry of a D = 8 model, with cross-entropy over
/// two heads plus an active drift penalty.
pub fn gradient_check(seed: SeedStream) -> Result<CheckOutcome> {
    let (worst, count) = gradient_check_worst(seed)?;
    Ok(CheckOutcome::new(
        "gradient_check",
        worst,
        1e-4,
        format!("{count} coordinates, step 1e-5"),
    ))
}

/// Worst relative error and number of checked coordinates.
pub fn gradient_check_worst(seed: SeedStream) -> Result<(f64, usize)> {
    let dims = ModelDims {
        image_size: 4,
        patch_size: 2,
        dim: 8,
        heads: 2,
        layers: 2,
        prompts: 3,
        mlp_ratio: 4,
    };
    let mut model = BackboneModel::init(dims, 10.0, 1e-6, seed.child("model"))?;
    model.add_head(2, seed.child("head0"));
    model.add_head(2, seed.child("head1"));
    // A target far from the current statistics keeps |Δμ|, |Δσ| away from
    // the kinks of the L1 penalty.
    let target = PromptDistributionTarget {
        per_layer: (0..dims.layers)
            .map(|l| {
                row_stats(
                    &gaussian(
                        dims.prompts,
                        dims.dim,
                        3.0,
                        seed.child("target").index(l as u64),
                    ),
                    1e-6,
                )
            })
            .collect(),
    };
    let batch: Vec<Sample> = (0..3)
        .map(|i| {
            let img = normal_vec(&mut seed.child("img").index(i).rng(), 16, 1.0);
            Ok(Sample {
                tokens: model.embed(&img)?,
                label: 2 + (i as usize % 2),
            })
        })
        .collect::<Result<_>>()?;
    let spec = LossSpec {
        head: 1,
        scope: LogitScope::Seen,
        ln_target: Some(&target),
        ln_coeff: 0.7,
    };
    let g = prompt_gradients(&batch, &model, &spec)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for l in 0..dims.layers {
        for i in 0..dims.prompts {
            for j in 0..dims.dim {
                let orig = model.prompts[l].values[(i, j)];
                model.prompts[l].values[(i, j)] = orig + h;
                let up = batch_loss(&batch, &model, &spec)?;
                model.prompts[l].values[(i, j)] = orig - h;
                let down = batch_loss(&batch, &model, &spec)?;
                model.prompts[l].values[(i, j)] = orig;
                worst = worst.max(grad_rel_error(
                    g.prompts[l][(i, j)],
                    (up - down) / (2.0 * h),
                ));
                count += 1;
            }
        }
    }
    for i in 0..dims.dim {
        for c in 0..2 {
            let orig = model.heads[1].weights[(i, c)];
            model.heads[1].weights[(i, c)] = orig + h;
            let up = batch_loss(&batch, &model, &spec)?;
            model.heads[1].weights[(i, c)] = orig - h;
            let down = batch_loss(&batch, &model, &spec)?;
            model.heads[1].weights[(i, c)] = orig;
            worst = worst.max(grad_rel_error(g.head[(i, c)], (up - down) / (2.0 * h)));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// The two-task hand case plus brute-force recomputation on random 5×5
/// lower-triangular matrices. Reports the largest deviation.
pub fn metric_formulas(seed: SeedStream, trials: usize) -> Result<CheckOutcome> {
    let hand = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]])?;
    let (acc, fgt) = final_metrics(&hand)?;
    let mut worst = (acc - 0.75)
        .abs()
        .max((fgt.unwrap_or(f64::INFINITY) - 0.1).abs());
    let mut rng = seed.rng();
    for _ in 0..trials {
        use rand::Rng as _;
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|j| (0..=j).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let a = AccuracyMatrix::from_rows(rows.clone())?;
        let (acc, fgt) = final_metrics(&a)?;
        // Brute force: enumerate all (j, i) pairs explicitly.
        let mut want_acc = 0.0;
        for v in &rows[4] {
            want_acc += v;
        }
        want_acc /= 5.0;
        let mut want_fgt = 0.0;
        for i in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for (j, row) in rows.iter().enumerate().take(4) {
                if j >= i && row[i] > best {
                    best = row[i];
                }
            }
            want_fgt += best - rows[4][i];
        }
        want_fgt /= 4.0;
        worst = worst
            .max((acc - want_acc).abs())
            .max((fgt.unwrap_or(f64::INFINITY) - want_fgt).abs());
    }
    Ok(CheckOutcome::new(
        "metric_formulas",
        worst,
        1e-15,
        format!("hand case plus {trials} random 5x5 matrices"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        for o in run_checks(CheckOptions::default()).unwrap() {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn perturbed_b1_is_caught() {
        let out = run_checks(CheckOptions {
            seed: 0,
            fault: Some(Fault::PerturbB1),
        })
        .unwrap();
        let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
        assert_eq!(failed, vec!["projector_residual"]);
    }
}

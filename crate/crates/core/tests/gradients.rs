//! Central finite differences against the analytic prompt and head gradients.

use nsp2_core::checks::{grad_rel_error, gradient_check_worst};
use nsp2_core::ln_constraint::PromptDistributionTarget;
use nsp2_core::numeric::row_stats;
use nsp2_core::rng::{normal_vec, SeedStream};
use nsp2_core::vit::{
    batch_loss, prompt_gradients, BackboneModel, LogitScope, LossSpec, ModelDims, Sample,
};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn d8() -> ModelDims {
    ModelDims {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        heads: 2,
        layers: 2,
        prompts: 4,
        mlp_ratio: 2,
    }
}

fn batch(model: &BackboneModel, labels: &[usize], seed: u64) -> Vec<Sample> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let img = normal_vec(&mut SeedStream::new(seed).index(i as u64).rng(), 64, 1.0);
            Sample {
                tokens: model.embed(&img).unwrap(),
                label,
            }
        })
        .collect()
}

/// Worst relative error over every prompt entry (per layer) and every entry
/// of the trained head.
fn worst_error(
    model: &mut BackboneModel,
    samples: &[Sample],
    spec: &LossSpec<'_>,
) -> (Vec<f64>, f64, usize) {
    let g = prompt_gradients(samples, model, spec).unwrap();
    let mut per_layer = Vec::new();
    let mut coords = 0;
    for l in 0..model.prompts.len() {
        let mut worst: f64 = 0.0;
        let (rows, cols) = model.prompts[l].values.shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.prompts[l].values[(i, j)];
                model.prompts[l].values[(i, j)] = orig + STEP;
                let up = batch_loss(samples, model, spec).unwrap();
                model.prompts[l].values[(i, j)] = orig - STEP;
                let down = batch_loss(samples, model, spec).unwrap();
                model.prompts[l].values[(i, j)] = orig;
                worst = worst.max(grad_rel_error(
                    g.prompts[l][(i, j)],
                    (up - down) / (2.0 * STEP),
                ));
                coords += 1;
            }
        }
        per_layer.push(worst);
    }
    let mut head_worst: f64 = 0.0;
    let (rows, cols) = model.heads[spec.head].weights.shape();
    for i in 0..rows {
        for c in 0..cols {
            let w = &mut model.heads[spec.head].weights;
            let orig = w[(i, c)];
            w[(i, c)] = orig + STEP;
            let up = batch_loss(samples, model, spec).unwrap();
            model.heads[spec.head].weights[(i, c)] = orig - STEP;
            let down = batch_loss(samples, model, spec).unwrap();
            model.heads[spec.head].weights[(i, c)] = orig;
            head_worst = head_worst.max(grad_rel_error(g.head[(i, c)], (up - down) / (2.0 * STEP)));
        }
    }
    (per_layer, head_worst, coords)
}

#[test]
fn current_scope_cross_entropy() {
    for seed in 0..3 {
        let mut model = BackboneModel::init(d8(), 10.0, 1e-6, SeedStream::new(seed)).unwrap();
        model.add_head(3, SeedStream::new(seed).child("h"));
        let samples = batch(&model, &[0, 1, 2, 1], 40 + seed);
        let spec = LossSpec {
            head: 0,
            scope: LogitScope::Current,
            ln_target: None,
            ln_coeff: 0.0,
        };
        let (layers, head, coords) = worst_error(&mut model, &samples, &spec);
        assert!(coords / layers.len() >= 20);
        for (l, w) in layers.iter().enumerate() {
            assert!(*w < TOL, "seed {seed} layer {l}: {w:e}");
        }
        assert!(head < TOL, "seed {seed} head: {head:e}");
    }
}

#[test]
fn seen_scope_with_drift_penalty() {
    let mut model = BackboneModel::init(d8(), 5.0, 1e-6, SeedStream::new(7)).unwrap();
    model.add_head(2, SeedStream::new(8));
    model.add_head(2, SeedStream::new(9));
    let target = PromptDistributionTarget {
        per_layer: model
            .prompts
            .iter()
            .map(|p| row_stats(&p.values.map(|v| 2.5 * v + 0.3), 1e-6))
            .collect(),
    };
    let samples = batch(&model, &[0, 3, 2, 1, 3], 50);
    let spec = LossSpec {
        head: 1,
        scope: LogitScope::Seen,
        ln_target: Some(&target),
        ln_coeff: 0.5,
    };
    let (layers, head, _) = worst_error(&mut model, &samples, &spec);
    for w in layers.iter().chain([&head]) {
        assert!(*w < TOL, "{w:e}");
    }
}

#[test]
fn library_gradient_check_passes_for_several_seeds() {
    for seed in 0..3 {
        let (worst, count) = gradient_check_worst(SeedStream::new(seed)).unwrap();
        assert!(count >= 40);
        assert!(worst < TOL, "seed {seed}: {worst:e}");
    }
}

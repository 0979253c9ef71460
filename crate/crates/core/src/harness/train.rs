//! Task-by-task training: loss assembly, projection of prompt updates,
//! the end-of-task projector rebuild, and class-incremental evaluation.

use rand::seq::SliceRandom;

use super::method::{LrSchedule, MethodConfig, Optimizer};
use crate::error::{contract, Error, Result};
use crate::ln_constraint::PromptDistributionTarget;
use crate::numeric::Matrix;
use crate::projector::{
    direct_relative_residuals, ProjectionKind, ProjectorConfig, ProjectorState, SpectrumRecord,
};
use crate::rng::SeedStream;
use crate::vit::{
    batch_loss, collect_projection_inputs, model_forward, prompt_gradients, BackboneModel,
    ForwardMode, LogitScope, LossSpec, Sample, TokenMatrix,
};

/// State carried from one task to the next besides the model itself.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub projectors: ProjectorState,
    /// Prompt statistics at the end of the previous task.
    pub target: Option<PromptDistributionTarget>,
    /// Stacked `(J₁, J₂)` of all finished tasks, per layer. Only kept when
    /// the direct audit is on.
    pub omegas: Option<Vec<(Matrix, Matrix)>>,
    pub tasks_done: usize,
}

impl ContinualState {
    pub fn new(model: &BackboneModel, config: &MethodConfig) -> Self {
        let d = &model.dims;
        let omegas = config.audit_direct.then(|| {
            (0..d.layers)
                .map(|_| (Matrix::zeros(0, d.dim), Matrix::zeros(0, d.prompts)))
                .collect()
        });
        Self {
            projectors: ProjectorState::new(
                d.layers,
                d.dim,
                d.prompts,
                ProjectorConfig {
                    mode: config.nullity,
                    eta1: config.eta1,
                    eta2: config.eta2,
                },
            ),
            target: None,
            omegas,
            tasks_done: 0,
        }
    }
}

/// Worst condition residuals of one layer's updates during one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAudit {
    pub layer: usize,
    /// Max relative `‖Ω₁ΔPᵀ‖` and `‖Ω₂ΔP‖` over all steps, through the
    /// covariance spectra.
    pub omega1: f64,
    pub omega2: f64,
    /// Same maxima against the stored `Ω` matrices, when audited.
    pub direct: Option<(f64, f64)>,
    pub steps: usize,
    /// Steps whose projected update was not identically zero.
    pub nonzero_updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLog {
    pub task: usize,
    pub steps: usize,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub audits: Vec<LayerAudit>,
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    /// Turns raw gradients into Adam steps in place.
    fn step(&mut self, grads: &mut [&mut Matrix]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((g, m), v) in grads.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for ((gi, mi), vi) in g
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * *gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * *gi * *gi;
                *gi = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Trains prompts and a fresh head on one task.
///
/// The first task (`state.tasks_done == 0`) uses raw updates and no drift
/// penalty for every method. Later tasks project each layer's candidate
/// update as the method prescribes. The new head is never projected; older
/// heads are not touched.
pub fn train_task(
    model: &mut BackboneModel,
    state: &ContinualState,
    train: &[Sample],
    config: &MethodConfig,
    seed: SeedStream,
) -> Result<TaskLog> {
    if train.is_empty() {
        return Err(contract("train_task", "empty training set"));
    }
    let task = state.tasks_done;
    if model.heads.len() != task {
        return Err(contract(
            "train_task",
            format!("{} heads before task {task}", model.heads.len()),
        ));
    }
    let classes = {
        let lo = train.iter().map(|s| s.label).min().unwrap_or(0);
        let hi = train.iter().map(|s| s.label).max().unwrap_or(0);
        if lo != model.total_classes() {
            return Err(contract(
                "train_task",
                format!(
                    "task labels start at {lo}, expected {}",
                    model.total_classes()
                ),
            ));
        }
        hi + 1 - lo
    };
    let head = model.add_head(classes, seed.child("head"));

    let later = task > 0;
    let kind = if later {
        config.method.projection()
    } else {
        ProjectionKind::None
    };
    let ln_target = if later && config.method.uses_ln_loss() {
        state.target.as_ref()
    } else {
        None
    };
    let spec = LossSpec {
        head,
        scope: config.scope,
        ln_target,
        ln_coeff: config.ln_coeff,
    };

    let layers = model.layers.len();
    let mut adam = match config.optimizer {
        Optimizer::Sgd => None,
        Optimizer::Adam { beta1, beta2, eps } => {
            let mut shapes: Vec<Matrix> = model
                .prompts
                .iter()
                .map(|p| Matrix::zeros(p.values.rows(), p.values.cols()))
                .collect();
            shapes.push(Matrix::zeros(model.dims.dim, classes));
            Some(Adam {
                beta1,
                beta2,
                eps,
                t: 0,
                m: shapes.clone(),
                v: shapes,
            })
        }
    };

    let mut audits: Vec<LayerAudit> = (0..layers)
        .map(|layer| LayerAudit {
            layer,
            omega1: 0.0,
            omega2: 0.0,
            direct: state.omegas.as_ref().map(|_| (0.0, 0.0)),
            steps: 0,
            nonzero_updates: 0,
        })
        .collect();

    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut final_loss = 0.0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed.child("shuffle").index(epoch as u64).rng());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mut g = prompt_gradients(&batch, model, &spec).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { task, step, detail },
                other => other,
            })?;
            epoch_loss += g.loss * batch.len() as f64;

            if let Some(adam) = adam.as_mut() {
                let mut refs: Vec<&mut Matrix> = g.prompts.iter_mut().collect();
                refs.push(&mut g.head);
                adam.step(&mut refs);
            }
            let scale = match config.schedule {
                LrSchedule::Constant => 1.0,
                LrSchedule::Cosine => {
                    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
                }
            };

            for (l, p_g) in g.prompts.iter().enumerate() {
                let dp = state.projectors.project(l, p_g, kind)?;
                let audit = &mut audits[l];
                audit.steps += 1;
                if dp.as_slice().iter().any(|v| *v != 0.0) {
                    audit.nonzero_updates += 1;
                }
                if later {
                    let (r1, r2) = state.projectors.relative_residuals(l, &dp);
                    audit.omega1 = audit.omega1.max(r1);
                    audit.omega2 = audit.omega2.max(r2);
                    if let (Some(omegas), Some(direct)) = (&state.omegas, audit.direct.as_mut()) {
                        let (o1, o2) = &omegas[l];
                        let (d1, d2) = direct_relative_residuals(o1, o2, &dp)?;
                        direct.0 = direct.0.max(d1);
                        direct.1 = direct.1.max(d2);
                    }
                }
                model.prompts[l].values.axpy(-config.lr * scale, &dp)?;
            }
            model.heads[head]
                .weights
                .axpy(-config.head_lr * scale, &g.head)?;

            let finite = model.prompts.iter().all(|p| p.values.is_finite())
                && model.heads[head].weights.is_finite();
            if !finite {
                return Err(Error::Diverged {
                    task,
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }
            step += 1;
        }
        final_loss = epoch_loss / train.len() as f64;
    }
    Ok(TaskLog {
        task,
        steps: step,
        final_loss,
        audits,
    })
}

/// Accumulates the finished task's `J₁`/`J₂` into the projectors, rebuilds
/// them, and records the prompt statistics for the next task's drift
/// penalty.
pub fn end_of_task_update(
    model: &BackboneModel,
    state: &mut ContinualState,
    train: &[Sample],
    config: &MethodConfig,
) -> Result<Vec<SpectrumRecord>> {
    let take = if config.collect_samples == 0 {
        train.len()
    } else {
        config.collect_samples.min(train.len())
    };
    let tokens: Vec<TokenMatrix> = train[..take].iter().map(|s| s.tokens.clone()).collect();
    let inputs = collect_projection_inputs(&tokens, model)?;
    let records = state.projectors.update(state.tasks_done, &inputs)?;
    if let Some(omegas) = state.omegas.as_mut() {
        for ((o1, o2), inp) in omegas.iter_mut().zip(&inputs) {
            o1.append_rows(&inp.j1)?;
            o2.append_rows(&inp.j2)?;
        }
    }
    state.target = Some(PromptDistributionTarget::capture(model));
    state.tasks_done += 1;
    Ok(records)
}

/// Class-incremental accuracy on each given test set: logits of every head
/// are concatenated and the argmax is compared with the global label.
pub fn evaluate(model: &BackboneModel, tests: &[Vec<Sample>]) -> Result<Vec<f64>> {
    tests
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Err(contract("evaluate", "empty test set"));
            }
            let mut correct = 0usize;
            for s in set {
                let out = model_forward(&s.tokens, model, ForwardMode::default())?;
                if argmax(&out.logits) == s.label {
                    correct += 1;
                }
            }
            Ok(correct as f64 / set.len() as f64)
        })
        .collect()
}

/// Mean task-local cross-entropy of `samples` under head `task`, without
/// the drift penalty.
pub fn task_loss(model: &BackboneModel, task: usize, samples: &[Sample]) -> Result<f64> {
    batch_loss(
        samples,
        model,
        &LossSpec {
            head: task,
            scope: LogitScope::Current,
            ln_target: None,
            ln_coeff: 0.0,
        },
    )
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::method::Method;
    use crate::vit::test_support::*;

    fn samples(model: &BackboneModel, labels: &[usize], seed: u64) -> Vec<Sample> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut img = tiny_image(seed + i as u64);
                // Make the two classes separable by a constant offset.
                for v in &mut img {
                    *v += if label % 2 == 0 { 2.0 } else { -2.0 };
                }
                Sample {
                    tokens: model.embed(&img).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn bare_model() -> BackboneModel {
        let mut m = tiny_model(3);
        m.heads.clear();
        m
    }

    fn cfg(method: Method) -> MethodConfig {
        MethodConfig {
            method,
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn first_task_is_identical_for_seq_and_nsp2() {
        let base = bare_model();
        let train = samples(&base, &[0, 1, 0, 1, 0, 1], 10);
        let mut runs = Vec::new();
        for method in [Method::Seq, Method::Nsp2] {
            let mut model = base.clone();
            let c = cfg(method);
            let state = ContinualState::new(&model, &c);
            train_task(&mut model, &state, &train, &c, SeedStream::new(1)).unwrap();
            runs.push(model);
        }
        assert_eq!(runs[0].prompts, runs[1].prompts);
        assert_eq!(runs[0].heads[0].weights, runs[1].heads[0].weights);
    }

    #[test]
    fn backbone_is_untouched() {
        let mut model = bare_model();
        let before = model.frozen_hash();
        let c = cfg(Method::Nsp2);
        let mut state = ContinualState::new(&model, &c);
        let t1 = samples(&model, &[0, 1, 0, 1], 20);
        train_task(&mut model, &state, &t1, &c, SeedStream::new(2)).unwrap();
        end_of_task_update(&model, &mut state, &t1, &c).unwrap();
        let t2 = samples(&model, &[2, 3, 2, 3], 30);
        train_task(&mut model, &state, &t2, &c, SeedStream::new(3)).unwrap();
        assert_eq!(model.frozen_hash(), before);
        assert_eq!(model.heads.len(), 2);
    }

    #[test]
    fn covariances_accumulate_over_tasks() {
        let mut model = bare_model();
        let c = cfg(Method::Nsp2);
        let mut state = ContinualState::new(&model, &c);
        let t1 = samples(&model, &[0, 1, 0], 40);
        train_task(&mut model, &state, &t1, &c, SeedStream::new(4)).unwrap();
        end_of_task_update(&model, &mut state, &t1, &c).unwrap();
        let toks: Vec<TokenMatrix> = t1.iter().map(|s| s.tokens.clone()).collect();
        let j = collect_projection_inputs(&toks, &model).unwrap();
        assert_eq!(state.projectors.layers[0].c1, j[0].j1.gram());
        assert_eq!(state.projectors.layers[1].b2.shape(), (2, 2));

        let c1_before = state.projectors.layers[0].c1.clone();
        let t2 = samples(&model, &[2, 3, 3], 50);
        train_task(&mut model, &state, &t2, &c, SeedStream::new(5)).unwrap();
        end_of_task_update(&model, &mut state, &t2, &c).unwrap();
        let toks: Vec<TokenMatrix> = t2.iter().map(|s| s.tokens.clone()).collect();
        let j2 = collect_projection_inputs(&toks, &model).unwrap();
        let want = c1_before.add(&j2[0].j1.gram()).unwrap();
        assert!(state.projectors.layers[0].c1.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn separable_single_task_is_learned() {
        let mut model = bare_model();
        let c = MethodConfig {
            epochs: 30,
            lr: 0.1,
            head_lr: 0.2,
            ..cfg(Method::Seq)
        };
        let state = ContinualState::new(&model, &c);
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let train = samples(&model, &labels, 60);
        let test = samples(&model, &labels, 160);
        train_task(&mut model, &state, &train, &c, SeedStream::new(6)).unwrap();
        let acc = evaluate(&model, &[test]).unwrap();
        assert!(acc[0] >= 0.99, "{acc:?}");
    }

    #[test]
    fn accuracy_ignores_test_order() {
        let mut model = bare_model();
        model.add_head(2, SeedStream::new(9));
        let mut test = samples(&model, &[0, 1, 1, 0, 1, 1, 0], 70);
        let a = evaluate(&model, &[test.clone()]).unwrap();
        test.reverse();
        assert_eq!(a, evaluate(&model, &[test]).unwrap());
    }

    #[test]
    fn argmax_ties_take_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

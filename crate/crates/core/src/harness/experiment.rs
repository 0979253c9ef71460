//! Method × seed grids over synthetic streams.

use std::time::Instant;

use rayon::prelude::*;

use super::method::MethodConfig;
use super::metrics::{final_metrics, mean_std, AccuracyMatrix};
use super::stream::{generate_task_stream, SyntheticTaskSpec, TaskStream};
use super::train::{end_of_task_update, evaluate, task_loss, train_task, ContinualState};
use crate::error::{contract, Result};
use crate::projector::SpectrumRecord;
use crate::rng::SeedStream;
use crate::vit::{BackboneModel, ModelDims, Sample};

/// Backbone shape apart from the image geometry, which comes from the
/// stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSettings {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub prompts: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            prompts: 4,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl ModelSettings {
    pub fn dims(&self, stream: &SyntheticTaskSpec) -> ModelDims {
        ModelDims {
            image_size: stream.image_size,
            patch_size: stream.patch_size,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            prompts: self.prompts,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub stream: SyntheticTaskSpec,
    pub model: ModelSettings,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
}

/// Task-local training loss of an old task, re-measured after a later one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDriftPoint {
    /// Task just finished (0-based).
    pub after_task: usize,
    /// Task whose training loss is measured (0-based).
    pub task: usize,
    pub loss: f64,
}

/// Worst condition residuals of one layer during one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRecord {
    pub task: usize,
    pub layer: usize,
    pub omega1: f64,
    pub omega2: f64,
    pub direct: Option<(f64, f64)>,
    pub steps: usize,
    pub nonzero_updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: MethodConfig,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub final_accuracy: f64,
    pub final_forgetting: Option<f64>,
    pub loss_drift: Vec<LossDriftPoint>,
    pub residuals: Vec<ResidualRecord>,
    pub spectra: Vec<SpectrumRecord>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Increase of task `task`'s training loss from the end of that task to
    /// the end of the run.
    pub fn loss_increase(&self, task: usize) -> Option<f64> {
        let pts: Vec<&LossDriftPoint> = self.loss_drift.iter().filter(|p| p.task == task).collect();
        let first = pts.iter().find(|p| p.after_task == task)?;
        let last = pts.iter().max_by_key(|p| p.after_task)?;
        Some(last.loss - first.loss)
    }
}

/// Mean and standard deviation across seeds for one method config.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub config: MethodConfig,
    pub accuracy: (f64, f64),
    /// `None` for single-task streams.
    pub forgetting: Option<(f64, f64)>,
    /// Increase of the first task's training loss over the run.
    pub loss_increase: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Method-major, then seed, in the order given.
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn summary(&self, config: &MethodConfig) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| &s.config == config)
    }
}

/// Embedded train and test sets of every task.
struct Embedded {
    train: Vec<Vec<Sample>>,
    test: Vec<Vec<Sample>>,
}

fn embed_stream(stream: &TaskStream, model: &BackboneModel) -> Result<Embedded> {
    let embed = |imgs: &[super::stream::Image]| -> Result<Vec<Sample>> {
        imgs.iter()
            .map(|i| {
                Ok(Sample {
                    tokens: model.embed(&i.pixels)?,
                    label: i.label,
                })
            })
            .collect()
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for task in &stream.tasks {
        train.push(embed(&task.train)?);
        test.push(embed(&task.test)?);
    }
    Ok(Embedded { train, test })
}

/// Initial model of a seed. It does not depend on the method, so every
/// method of a seed starts from the same backbone and prompts.
pub fn seed_model(
    dims: ModelDims,
    settings: &ModelSettings,
    config: &MethodConfig,
    seed: u64,
) -> Result<BackboneModel> {
    BackboneModel::init(
        dims,
        config.temperature,
        settings.ln_eps,
        SeedStream::new(seed).child("model"),
    )
}

/// Trains one method on one stream from the seed's initial model.
pub fn run_single(
    stream: &TaskStream,
    settings: &ModelSettings,
    dims: ModelDims,
    config: &MethodConfig,
    seed: u64,
) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let mut model = seed_model(dims, settings, config, seed)?;
    let frozen = model.frozen_hash();
    let data = embed_stream(stream, &model)?;
    let mut state = ContinualState::new(&model, config);
    let run_seed = SeedStream::new(seed).child("train");

    let mut accuracy = AccuracyMatrix::new();
    let mut loss_drift = Vec::new();
    let mut residuals = Vec::new();
    let mut spectra = Vec::new();
    for t in 0..stream.tasks.len() {
        let task_seed = run_seed.index(t as u64);
        let log = train_task(&mut model, &state, &data.train[t], config, task_seed)?;
        for a in log.audits {
            residuals.push(ResidualRecord {
                task: t,
                layer: a.layer,
                omega1: a.omega1,
                omega2: a.omega2,
                direct: a.direct,
                steps: a.steps,
                nonzero_updates: a.nonzero_updates,
            });
        }
        spectra.extend(end_of_task_update(
            &model,
            &mut state,
            &data.train[t],
            config,
        )?);
        accuracy.push_row(evaluate(&model, &data.test[..=t])?)?;
        for old in 0..=t.min(1) {
            loss_drift.push(LossDriftPoint {
                after_task: t,
                task: old,
                loss: task_loss(&model, old, &data.train[old])?,
            });
        }
    }
    if model.frozen_hash() != frozen {
        return Err(contract(
            "run_single",
            "frozen backbone changed during training",
        ));
    }
    let (final_accuracy, final_forgetting) = final_metrics(&accuracy)?;
    Ok(RunRecord {
        config: *config,
        seed,
        accuracy,
        final_accuracy,
        final_forgetting,
        loss_drift,
        residuals,
        spectra,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs every method on every seed. Each seed gets its own stream (the
/// stream spec's seed is replaced by the run seed) shared by all methods.
/// Grid cells are independent and may run in parallel; results come back
/// in method-major order regardless.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    if spec.methods.is_empty() || spec.seeds.is_empty() {
        return Err(contract("run_experiment", "no methods or no seeds"));
    }
    for m in &spec.methods {
        m.validate()?;
    }
    let dims = spec.model.dims(&spec.stream);
    dims.validate()?;
    let streams: Vec<TaskStream> = spec
        .seeds
        .iter()
        .map(|&seed| {
            generate_task_stream(&SyntheticTaskSpec {
                seed,
                ..spec.stream.clone()
            })
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..spec.methods.len())
        .flat_map(|m| (0..spec.seeds.len()).map(move |s| (m, s)))
        .collect();
    let runs: Vec<RunRecord> = cells
        .par_iter()
        .map(|&(m, s)| {
            run_single(
                &streams[s],
                &spec.model,
                dims,
                &spec.methods[m],
                spec.seeds[s],
            )
        })
        .collect::<Result<_>>()?;

    let summaries = spec
        .methods
        .iter()
        .map(|config| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| &r.config == config).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.final_accuracy).collect();
            let fgt: Option<Vec<f64>> = mine.iter().map(|r| r.final_forgetting).collect();
            let inc: Option<Vec<f64>> = mine.iter().map(|r| r.loss_increase(0)).collect();
            MethodSummary {
                config: *config,
                accuracy: mean_std(&acc),
                forgetting: fgt.filter(|_| spec.stream.tasks > 1).map(|f| mean_std(&f)),
                loss_increase: inc.filter(|_| spec.stream.tasks > 1).map(|f| mean_std(&f)),
            }
        })
        .collect();
    Ok(ExperimentReport { runs, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::method::Method;

    fn tiny_spec() -> ExperimentSpec {
        let base = MethodConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        ExperimentSpec {
            stream: SyntheticTaskSpec {
                image_size: 4,
                patch_size: 2,
                tasks: 2,
                train_per_class: 6,
                test_per_class: 5,
                ..Default::default()
            },
            model: ModelSettings {
                dim: 8,
                heads: 2,
                prompts: 2,
                ..Default::default()
            },
            methods: vec![
                base.with_method(Method::Seq),
                base.with_method(Method::Nsp2),
            ],
            seeds: vec![0, 1],
        }
    }

    #[test]
    fn grid_shape_and_summaries() {
        let report = run_experiment(&tiny_spec()).unwrap();
        assert_eq!(report.runs.len(), 4);
        assert_eq!(report.runs[1].config.method, Method::Seq);
        assert_eq!(report.runs[1].seed, 1);
        assert_eq!(report.summaries.len(), 2);
        let s = &report.summaries[0];
        assert!(s.forgetting.is_some());
        assert!(s.accuracy.1 >= 0.0);
        for r in &report.runs {
            assert_eq!(r.accuracy.tasks(), 2);
            // Loss of task 1 after tasks 1 and 2, loss of task 2 after task 2.
            assert_eq!(r.loss_drift.len(), 3);
            assert_eq!(r.residuals.len(), 4);
        }
    }

    #[test]
    fn reruns_are_identical() {
        let a = run_experiment(&tiny_spec()).unwrap();
        let b = run_experiment(&tiny_spec()).unwrap();
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.accuracy, y.accuracy);
            assert_eq!(x.loss_drift, y.loss_drift);
        }
    }

    #[test]
    fn seq_and_nsp2_share_the_first_task() {
        let report = run_experiment(&tiny_spec()).unwrap();
        let seq = &report.runs[0];
        let nsp = &report.runs[2];
        assert_eq!(seq.seed, nsp.seed);
        assert_eq!(seq.accuracy.rows()[0], nsp.accuracy.rows()[0]);
        assert_eq!(seq.loss_drift[0], nsp.loss_drift[0]);
    }
}

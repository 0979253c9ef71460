//! Exact null-space updates on a model small enough that both Ω matrices
//! keep a non-trivial null space after the first task: with one collected
//! sample, Ω₂ has N·H = 10 rows against M = 12 prompt columns and Ω₁ has 10
//! rows against D = 16.

use nsp2_core::harness::{
    run_experiment, ExperimentSpec, Method, MethodConfig, ModelSettings, SyntheticTaskSpec,
};
use nsp2_core::projector::NullityMode;

fn spec(method: Method) -> ExperimentSpec {
    ExperimentSpec {
        stream: SyntheticTaskSpec {
            image_size: 8,
            patch_size: 4,
            tasks: 2,
            train_per_class: 16,
            test_per_class: 8,
            ..SyntheticTaskSpec::default()
        },
        model: ModelSettings {
            dim: 16,
            heads: 2,
            layers: 2,
            prompts: 12,
            ..ModelSettings::default()
        },
        methods: vec![MethodConfig {
            eta1: 1.0,
            eta2: 1.0,
            nullity: NullityMode::ExactZero,
            collect_samples: 1,
            audit_direct: true,
            epochs: 3,
            ..MethodConfig::default().with_method(method)
        }],
        seeds: vec![0, 1],
    }
}

#[test]
fn projected_updates_satisfy_both_conditions() {
    let report = run_experiment(&spec(Method::Nsp2NoLnLoss)).unwrap();
    for run in &report.runs {
        let later: Vec<_> = run.residuals.iter().filter(|r| r.task > 0).collect();
        assert!(!later.is_empty());
        let nonzero: usize = later.iter().map(|r| r.nonzero_updates).sum();
        assert!(nonzero > 0, "all projected updates vanished");
        for r in later {
            let (d1, d2) = r.direct.expect("direct audit enabled");
            assert!(d1 <= 1e-8 && d2 <= 1e-8, "layer {}: {d1:e} {d2:e}", r.layer);
            assert!(r.omega1 <= 1e-8 && r.omega2 <= 1e-8);
        }
    }
}

#[test]
fn unprojected_updates_violate_the_conditions() {
    let report = run_experiment(&spec(Method::Seq)).unwrap();
    let worst = report
        .runs
        .iter()
        .flat_map(|run| run.residuals.iter().filter(|r| r.task > 0))
        .map(|r| r.omega1.max(r.omega2))
        .fold(0.0, f64::max);
    assert!(worst > 1e-6, "{worst:e}");
}

//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs without the libtest harness so the lines always reach stdout.

use std::process::ExitCode;
use std::time::Instant;

use nsp2_core::checks::{
    gradient_check, ln_bypass_consistency, ln_shift_identity, metric_formulas,
};
use nsp2_core::harness::{
    run_experiment, ExperimentReport, ExperimentSpec, Method, MethodConfig, MethodSummary,
    ModelSettings, SyntheticTaskSpec,
};
use nsp2_core::projector::NullityMode;
use nsp2_core::rng::SeedStream;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    passed: bool,
    text: String,
}

fn line(passed: bool, text: String) -> Line {
    Line { passed, text }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Exact-zero nullity with η = 1 on the default model, every step audited
/// against the stacked Ω matrices. Only steps of the second task onwards are
/// projected; the first task trains freely.
fn condition_exactness() -> Line {
    const TOL: f64 = 1e-8;
    let config = MethodConfig {
        eta1: 1.0,
        eta2: 1.0,
        nullity: NullityMode::ExactZero,
        audit_direct: true,
        ..MethodConfig::default()
    };
    let spec = ExperimentSpec {
        stream: SyntheticTaskSpec::default(),
        model: ModelSettings::default(),
        methods: vec![config],
        seeds: vec![0],
    };
    let (report, secs) = timed(|| run_experiment(&spec));
    let report = match report {
        Ok(r) => r,
        Err(e) => return line(false, format!("run failed: {e}")),
    };
    let mut worst: f64 = 0.0;
    let (mut audited, mut nonzero) = (0, 0);
    let mut nullity = (usize::MAX, usize::MAX);
    for run in &report.runs {
        for r in run.residuals.iter().filter(|r| r.task > 0) {
            let (d1, d2) = r.direct.unwrap_or((f64::INFINITY, f64::INFINITY));
            worst = worst.max(d1).max(d2).max(r.omega1).max(r.omega2);
            audited += r.steps;
            nonzero += r.nonzero_updates;
        }
        for s in &run.spectra {
            match s.matrix {
                "C1" => nullity.0 = nullity.0.min(s.nullity),
                "C2" => nullity.1 = nullity.1.min(s.nullity),
                _ => {}
            }
        }
    }
    let passed = worst <= TOL && audited > 0 && secs <= 300.0;
    line(
        passed,
        format!(
            "worst relative residual {worst:.2e} (tol {TOL:.0e}) over {audited} projected layer-steps, \
             {nonzero} of them nonzero; smallest exact nullity C1 {}, C2 {}; {secs:.0}s (limit 300s)",
            nullity.0, nullity.1
        ),
    )
}

fn property(
    name: &str,
    f: impl FnOnce() -> nsp2_core::Result<nsp2_core::checks::CheckOutcome>,
    limit: f64,
) -> Line {
    let (outcome, secs) = timed(f);
    match outcome {
        Ok(o) => line(
            o.passed && secs <= limit,
            format!(
                "{name}: {:.2e} (tol {:.0e}), {}; {secs:.1}s (limit {limit:.0}s)",
                o.measured, o.tolerance, o.detail
            ),
        ),
        Err(e) => line(false, format!("{name}: {e}")),
    }
}

struct Benchmark {
    report: ExperimentReport,
    secs: f64,
    base: MethodConfig,
    etas: Vec<(f64, MethodConfig)>,
}

impl Benchmark {
    fn run() -> nsp2_core::Result<Self> {
        let base = MethodConfig::default();
        let mut methods: Vec<MethodConfig> = [
            Method::Seq,
            Method::Nsp2,
            Method::Nsp2B1Only,
            Method::Nsp2B2Only,
            Method::Pgp,
        ]
        .iter()
        .map(|m| base.with_method(*m))
        .collect();
        let etas: Vec<(f64, MethodConfig)> = [0.0, 0.5, 0.9, 1.0]
            .iter()
            .map(|&eta| {
                (
                    eta,
                    MethodConfig {
                        eta1: eta,
                        eta2: eta,
                        ..base
                    },
                )
            })
            .collect();
        for (_, c) in &etas {
            if !methods.contains(c) {
                methods.push(*c);
            }
        }
        let spec = ExperimentSpec {
            stream: SyntheticTaskSpec::default(),
            model: ModelSettings::default(),
            methods,
            seeds: SEEDS.to_vec(),
        };
        let (report, secs) = timed(|| run_experiment(&spec));
        Ok(Self {
            report: report?,
            secs,
            base,
            etas,
        })
    }

    fn get(&self, m: Method) -> &MethodSummary {
        self.report
            .summary(&self.base.with_method(m))
            .expect("method in grid")
    }
}

fn fgt(s: &MethodSummary) -> f64 {
    s.forgetting.map_or(f64::NAN, |f| f.0)
}

fn anti_forgetting(b: &Benchmark) -> Line {
    let (seq, nsp2) = (b.get(Method::Seq), b.get(Method::Nsp2));
    let ratio = fgt(nsp2) / fgt(seq);
    let gain = (nsp2.accuracy.0 - seq.accuracy.0) * 100.0;
    let passed = ratio <= 0.5 && gain >= 2.0 && b.secs <= 900.0;
    line(
        passed,
        format!(
            "forgetting nsp2 {:.3} vs seq {:.3} (ratio {ratio:.3}, limit 0.5); accuracy nsp2 {:.3} vs seq {:.3} \
             (+{gain:.1} points, need 2); benchmark grid {:.0}s (limit 900s)",
            fgt(nsp2),
            fgt(seq),
            nsp2.accuracy.0,
            seq.accuracy.0,
            b.secs
        ),
    )
}

fn loss_retention(b: &Benchmark) -> Line {
    let inc = |m| b.get(m).loss_increase.map_or(f64::NAN, |x| x.0);
    let (seq, nsp2) = (inc(Method::Seq), inc(Method::Nsp2));
    let passed = seq > 0.0 && 5.0 * nsp2 <= seq;
    line(
        passed,
        format!("task-1 training loss increase: seq {seq:.4}, nsp2 {nsp2:.4} (need nsp2 ≤ seq / 5 = {:.4})", seq / 5.0),
    )
}

fn ablation_ordering(b: &Benchmark) -> Line {
    let [seq, full, b1, b2] = [
        Method::Seq,
        Method::Nsp2,
        Method::Nsp2B1Only,
        Method::Nsp2B2Only,
    ]
    .map(|m| b.get(m));
    let ordered = fgt(full) <= fgt(b1).min(fgt(b2)) && fgt(b1).max(fgt(b2)) <= fgt(seq);
    let best = full.accuracy.0 >= b1.accuracy.0.max(b2.accuracy.0).max(seq.accuracy.0);
    line(
        ordered && best,
        format!(
            "forgetting nsp2 {:.3} ≤ {{b1_only {:.3}, b2_only {:.3}}} ≤ seq {:.3}; accuracy nsp2 {:.3}, b1_only {:.3}, \
             b2_only {:.3}, seq {:.3}",
            fgt(full),
            fgt(b1),
            fgt(b2),
            fgt(seq),
            full.accuracy.0,
            b1.accuracy.0,
            b2.accuracy.0,
            seq.accuracy.0
        ),
    )
}

fn eta_tradeoff(b: &Benchmark) -> Line {
    let points: Vec<(f64, f64, f64)> = b
        .etas
        .iter()
        .map(|(eta, c)| {
            let s = b.report.summary(c).expect("eta in grid");
            (*eta, fgt(s), s.accuracy.0)
        })
        .collect();
    let monotone = points.windows(2).all(|w| w[1].1 <= w[0].1);
    let best = points
        .iter()
        .cloned()
        .fold((f64::NAN, f64::NAN, f64::MIN), |a, p| {
            if p.2 > a.2 {
                p
            } else {
                a
            }
        });
    let kind = if best.0 == 0.0 || best.0 == 1.0 {
        "boundary"
    } else {
        "interior"
    };
    let curve: Vec<String> = points
        .iter()
        .map(|(e, f, a)| format!("η={e}: fgt {f:.3} acc {a:.3}"))
        .collect();
    line(
        monotone,
        format!(
            "{}; accuracy maximum at η={} ({kind})",
            curve.join(", "),
            best.0
        ),
    )
}

fn pgp_comparison(b: &Benchmark) -> Line {
    let (nsp2, pgp) = (b.get(Method::Nsp2), b.get(Method::Pgp));
    line(
        fgt(nsp2) <= fgt(pgp),
        format!(
            "forgetting nsp2 {:.3} vs pgp {:.3}; accuracy nsp2 {:.3} vs pgp {:.3}",
            fgt(nsp2),
            fgt(pgp),
            nsp2.accuracy.0,
            pgp.accuracy.0
        ),
    )
}

fn main() -> ExitCode {
    let seed = SeedStream::new(0);
    let mut lines = vec![
        ("1 condition exactness", condition_exactness()),
        (
            "2 self-attention consistency",
            property(
                "ln_bypass_consistency",
                || ln_bypass_consistency(seed.child("bypass"), 100),
                60.0,
            ),
        ),
        (
            "3 LN shift identity",
            property(
                "ln_shift_identity",
                || ln_shift_identity(seed.child("ln"), 100),
                60.0,
            ),
        ),
        (
            "4 gradient correctness",
            property(
                "gradient_check",
                || gradient_check(seed.child("grad")),
                60.0,
            ),
        ),
        (
            "5 metric formulas",
            property(
                "metric_formulas",
                || metric_formulas(seed.child("metrics"), 100),
                60.0,
            ),
        ),
    ];
    match Benchmark::run() {
        Ok(b) => {
            lines.push(("6 anti-forgetting", anti_forgetting(&b)));
            lines.push(("7 loss retention", loss_retention(&b)));
            lines.push(("8 ablation ordering", ablation_ordering(&b)));
            lines.push(("9 eta trade-off", eta_tradeoff(&b)));
            lines.push(("10 pgp comparison", pgp_comparison(&b)));
        }
        Err(e) => {
            for name in [
                "6 anti-forgetting",
                "7 loss retention",
                "8 ablation ordering",
                "9 eta trade-off",
                "10 pgp comparison",
            ] {
                lines.push((name, line(false, format!("benchmark failed: {e}"))));
            }
        }
    }
    let mut failed = 0;
    for (name, l) in &lines {
        println!(
            "{} [{name}] {}",
            if l.passed { "PASS" } else { "FAIL" },
            l.text
        );
        failed += usize::from(!l.passed);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        lines.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

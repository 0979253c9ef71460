//! CSV and text outputs of an experiment.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so
//! parsing a field back yields the exact `f64`. Absent values (forgetting of
//! a one-task run, unaudited residuals) are empty fields. Tasks and layers
//! are 1-based in every file.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.txt          canonical echo of the producing config
//! summary.csv         method,seed,final_avg_accuracy,final_avg_forgetting
//! summary_stats.csv   per method: means and standard deviations over seeds
//! runs/<label>/       one directory per method × seed
//!     meta.txt        config echo, method, seed, metrics, wall clock
//!     accuracy.csv    after_task,task_1..task_T (row j, column i)
//!     residuals.csv   task,layer,residual_omega1,residual_omega2
//!     audit.csv       task,layer,steps,nonzero_updates,direct_omega1,direct_omega2
//!     loss_drift.csv  after_task,task,loss
//!     spectrum.csv    task,matrix,layer,index,singular_value,chosen_nullity
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::harness::{AccuracyMatrix, ExperimentReport, ResidualRecord, RunRecord};
use crate::projector::SpectrumRecord;

pub const SUMMARY_HEADER: &str = "method,seed,final_avg_accuracy,final_avg_forgetting";
pub const STATS_HEADER: &str = "method,eta1,eta2,runs,accuracy_mean,accuracy_std,forgetting_mean,forgetting_std,loss_increase_mean,loss_increase_std";
pub const RESIDUALS_HEADER: &str = "task,layer,residual_omega1,residual_omega2";
pub const AUDIT_HEADER: &str = "task,layer,steps,nonzero_updates,direct_omega1,direct_omega2";
pub const LOSS_DRIFT_HEADER: &str = "after_task,task,loss";
pub const SPECTRUM_HEADER: &str = "task,matrix,layer,index,singular_value,chosen_nullity";
pub const SWEEP_HEADER: &str = "eta,seed,accuracy,forgetting";

/// Shortest representation that parses back to the same value.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Directory name of one run.
pub fn run_label(run: &RunRecord) -> String {
    format!("{}-seed{}", run.config.method, run.seed)
}

pub fn summary_csv(runs: &[RunRecord]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in runs {
        writeln!(
            out,
            "{},{},{},{}",
            r.config.method,
            r.seed,
            num(r.final_accuracy),
            opt(r.final_forgetting)
        )
        .unwrap();
    }
    out
}

pub fn stats_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for s in &report.summaries {
        let runs = report.runs.iter().filter(|r| r.config == s.config).count();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.config.method,
            num(s.config.eta1),
            num(s.config.eta2),
            runs,
            num(s.accuracy.0),
            num(s.accuracy.1),
            opt(s.forgetting.map(|f| f.0)),
            opt(s.forgetting.map(|f| f.1)),
            opt(s.loss_increase.map(|f| f.0)),
            opt(s.loss_increase.map(|f| f.1)),
        )
        .unwrap();
    }
    out
}

pub fn accuracy_csv(a: &AccuracyMatrix) -> String {
    let t = a.tasks();
    let mut out = String::from("after_task");
    for i in 1..=t {
        write!(out, ",task_{i}").unwrap();
    }
    out.push('\n');
    for (j, row) in a.rows().iter().enumerate() {
        write!(out, "{}", j + 1).unwrap();
        for i in 0..t {
            out.push(',');
            if let Some(v) = row.get(i) {
                out.push_str(&num(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn residuals_csv(rows: &[ResidualRecord]) -> String {
    let mut out = format!("{RESIDUALS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.task + 1,
            r.layer + 1,
            num(r.omega1),
            num(r.omega2)
        )
        .unwrap();
    }
    out
}

pub fn audit_csv(rows: &[ResidualRecord]) -> String {
    let mut out = format!("{AUDIT_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.task + 1,
            r.layer + 1,
            r.steps,
            r.nonzero_updates,
            opt(r.direct.map(|d| d.0)),
            opt(r.direct.map(|d| d.1)),
        )
        .unwrap();
    }
    out
}

pub fn loss_drift_csv(run: &RunRecord) -> String {
    let mut out = format!("{LOSS_DRIFT_HEADER}\n");
    for p in &run.loss_drift {
        writeln!(out, "{},{},{}", p.after_task + 1, p.task + 1, num(p.loss)).unwrap();
    }
    out
}

pub fn spectrum_csv(records: &[SpectrumRecord]) -> String {
    let mut out = format!("{SPECTRUM_HEADER}\n");
    for r in records {
        for (i, s) in r.singular_values.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.task + 1,
                r.matrix,
                r.layer + 1,
                i + 1,
                num(*s),
                r.nullity
            )
            .unwrap();
        }
    }
    out
}

/// `eta,seed,accuracy,forgetting`, one row per run.
pub fn sweep_csv(runs: &[RunRecord]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in runs {
        writeln!(
            out,
            "{},{},{},{}",
            num(r.config.eta1),
            r.seed,
            num(r.final_accuracy),
            opt(r.final_forgetting)
        )
        .unwrap();
    }
    out
}

fn meta(run: &RunRecord, config_echo: &str) -> String {
    let mut out = String::from("# producing config\n");
    out.push_str(config_echo);
    writeln!(out, "# run").unwrap();
    writeln!(out, "# method = {}", run.config.method).unwrap();
    writeln!(out, "# seed = {}", run.seed).unwrap();
    writeln!(out, "# final_avg_accuracy = {}", num(run.final_accuracy)).unwrap();
    writeln!(
        out,
        "# final_avg_forgetting = {}",
        opt(run.final_forgetting)
    )
    .unwrap();
    writeln!(out, "# wall_clock_secs = {}", num(run.wall_clock_secs)).unwrap();
    out
}

/// Writes every file of one run under `dir/runs/<label>/`.
pub fn write_run(dir: &Path, label: &str, run: &RunRecord, config_echo: &str) -> Result<()> {
    let d = dir.join("runs").join(label);
    fs::create_dir_all(&d)?;
    fs::write(d.join("meta.txt"), meta(run, config_echo))?;
    fs::write(d.join("accuracy.csv"), accuracy_csv(&run.accuracy))?;
    fs::write(d.join("residuals.csv"), residuals_csv(&run.residuals))?;
    fs::write(d.join("audit.csv"), audit_csv(&run.residuals))?;
    fs::write(d.join("loss_drift.csv"), loss_drift_csv(run))?;
    fs::write(d.join("spectrum.csv"), spectrum_csv(&run.spectra))?;
    Ok(())
}

/// Writes the full report of `nsp2 run`.
pub fn write_report(dir: &Path, report: &ExperimentReport, config_echo: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config_echo)?;
    fs::write(dir.join("summary.csv"), summary_csv(&report.runs))?;
    fs::write(dir.join("summary_stats.csv"), stats_csv(report))?;
    for run in &report.runs {
        write_run(dir, &run_label(run), run, config_echo)?;
    }
    Ok(())
}

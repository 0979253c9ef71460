//! `nsp2`: run experiments, sweeps and the property suite.
//!
//! Exit codes: 0 success, 1 config or usage error, 2 runtime error,
//! 3 property check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use nsp2_core::checks::{run_checks, CheckOptions, Fault};
use nsp2_core::config::{defaults_table, RunConfig};
use nsp2_core::harness::{run_experiment, ExperimentReport, ExperimentSpec, Method};
use nsp2_core::report;
use nsp2_core::Error;

#[derive(Parser)]
#[command(
    name = "nsp2",
    version,
    about = "Null-space projected prompt tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method on every seed and write CSV reports.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the property suite and print one line per property.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break a component on purpose to see the suite fail.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Run nsp2 for each eta (eta1 = eta2) and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated grid, e.g. 0,0.5,0.9,1
        #[arg(long, value_delimiter = ',', required = true)]
        eta: Vec<f64>,
    },
    /// Print every config key with its default value.
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    PerturbB1,
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;
const CHECK_FAILURE: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config } => run(&config),
        Command::Check { seed, inject_fault } => check(seed, inject_fault),
        Command::Sweep { config, eta } => sweep(&config, &eta),
        Command::Defaults => {
            print!("{}", defaults_table());
            ExitCode::SUCCESS
        }
    }
}

fn load(path: &Path) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(CONFIG_ERROR)
    })
}

/// Maps a library error onto the exit-code contract, leaving a marker in the
/// output directory when it got that far.
fn fail(err: anyhow::Error, out: Option<&Path>) -> ExitCode {
    eprintln!("error: {err:#}");
    let config_error = matches!(err.downcast_ref::<Error>(), Some(Error::Config(_)));
    if let Some(dir) = out {
        if dir.is_dir() {
            let _ = fs::write(dir.join("FAILED.txt"), format!("{err:#}\n"));
        }
    }
    ExitCode::from(if config_error {
        CONFIG_ERROR
    } else {
        RUNTIME_ERROR
    })
}

fn print_summary(report: &ExperimentReport) {
    for s in &report.summaries {
        let fgt = s
            .forgetting
            .map(|(m, sd)| format!("{m:.4} ± {sd:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{:<16} eta=({}, {})  accuracy {:.4} ± {:.4}  forgetting {fgt}",
            s.config.method.name(),
            s.config.eta1,
            s.config.eta2,
            s.accuracy.0,
            s.accuracy.1
        );
    }
}

fn start_output(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let _ = fs::remove_file(cfg.output_dir.join("FAILED.txt"));
    fs::write(cfg.output_dir.join("config.txt"), cfg.echo())?;
    Ok(())
}

fn run(path: &Path) -> ExitCode {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let result = (|| -> anyhow::Result<ExperimentReport> {
        start_output(&cfg)?;
        let report = run_experiment(&cfg.experiment())?;
        report::write_report(&cfg.output_dir, &report, &cfg.echo())?;
        Ok(report)
    })();
    match result {
        Ok(report) => {
            print_summary(&report);
            println!("reports written to {}", cfg.output_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e, Some(&cfg.output_dir)),
    }
}

fn sweep(path: &Path, grid: &[f64]) -> ExitCode {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(bad) = grid.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        eprintln!("error: eta {bad} outside [0, 1]");
        return ExitCode::from(CONFIG_ERROR);
    }
    let base = cfg.method_config(Method::Nsp2);
    let spec = ExperimentSpec {
        methods: grid
            .iter()
            .map(|&eta| nsp2_core::harness::MethodConfig {
                eta1: eta,
                eta2: eta,
                ..base
            })
            .collect(),
        ..cfg.experiment()
    };
    let result = (|| -> anyhow::Result<ExperimentReport> {
        start_output(&cfg)?;
        let report = run_experiment(&spec)?;
        let dir = &cfg.output_dir;
        fs::write(dir.join("sweep.csv"), report::sweep_csv(&report.runs))?;
        fs::write(dir.join("summary_stats.csv"), report::stats_csv(&report))?;
        for run in &report.runs {
            let label = format!("nsp2-eta{}-seed{}", report::num(run.config.eta1), run.seed);
            report::write_run(dir, &label, run, &cfg.echo())?;
        }
        Ok(report)
    })();
    match result {
        Ok(report) => {
            print_summary(&report);
            println!(
                "sweep written to {}",
                cfg.output_dir.join("sweep.csv").display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(e, Some(&cfg.output_dir)),
    }
}

fn check(seed: u64, fault: Option<FaultArg>) -> ExitCode {
    let opts = CheckOptions {
        seed,
        fault: fault.map(|f| match f {
            FaultArg::PerturbB1 => Fault::PerturbB1,
        }),
    };
    let outcomes = match run_checks(opts) {
        Ok(o) => o,
        Err(e) => return fail(e.into(), None),
    };
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{} {:<24} measured {:.3e} (tolerance {:.0e}) {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.measured,
            o.tolerance,
            o.detail
        );
        if !o.passed {
            failed.push(format!("{} ({:.3e})", o.name, o.measured));
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failing properties: {}", failed.join(", "));
        ExitCode::from(CHECK_FAILURE)
    }
}

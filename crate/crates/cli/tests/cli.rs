use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nsp2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsp2"))
        .args(args)
        .output()
        .expect("spawn nsp2")
}

/// A run small enough for a test: one task pair of tiny images.
fn tiny_config(dir: &Path, out: &str) -> std::path::PathBuf {
    let text = format!(
        "output_dir = {}
seeds = 0,1
methods = seq,nsp2
stream.image_size = 8
stream.tasks = 2
stream.train_per_class = 8
stream.test_per_class = 4
model.dim = 8
model.heads = 2
model.layers = 1
model.prompts = 2
train.epochs = 1
train.batch_size = 4
",
        dir.join(out).display()
    );
    let path = dir.join(format!("{out}.cfg"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_summary_with_exact_header() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "out");
    let o = nsp2(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("out/summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("method,seed,final_avg_accuracy,final_avg_forgetting")
    );
    assert_eq!(lines.count(), 4);
    for f in [
        "accuracy.csv",
        "residuals.csv",
        "audit.csv",
        "loss_drift.csv",
        "spectrum.csv",
        "meta.txt",
    ] {
        assert!(
            tmp.path().join("out/runs/nsp2-seed1").join(f).is_file(),
            "{f}"
        );
    }
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "seeds = 0\nfoo = 1\n").unwrap();
    let o = nsp2(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("foo"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny_config(tmp.path(), "a");
    let b = tiny_config(tmp.path(), "b");
    for cfg in [&a, &b] {
        assert!(nsp2(&["run", "--config", cfg.to_str().unwrap()])
            .status
            .success());
    }
    for f in [
        "summary.csv",
        "runs/nsp2-seed0/accuracy.csv",
        "runs/nsp2-seed0/residuals.csv",
    ] {
        let x = fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn check_passes_and_fails_under_injected_fault() {
    let ok = nsp2(&["check"]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stdout)
    );
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5);

    let bad = nsp2(&["check", "--inject-fault", "perturb-b1"]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL projector_residual "));
}

#[test]
fn sweep_writes_one_row_per_eta_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "sw");
    let o = nsp2(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--eta",
        "0,0.5,1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("eta,seed,accuracy,forgetting"));
    assert_eq!(lines.count(), 3 * 2);
}

#[test]
fn sweep_rejects_eta_outside_unit_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "x");
    let o = nsp2(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--eta",
        "0.5,1.5",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn defaults_lists_every_section() {
    let o = nsp2(&["defaults"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for key in [
        "stream.tasks",
        "model.temperature",
        "train.lr",
        "projector.eta1",
        "ln.coeff",
    ] {
        assert!(text.contains(key), "{key}");
    }
}

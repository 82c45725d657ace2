use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 7] = ["batch=2", "test_batch=2", "horizon=2", "n_points=21", "hidden=8", "max_iters=3", "p=8"];

fn snode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snode")).args(args).output().expect("binary runs")
}

fn run_tiny(method: &str, dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", "--method", method, "--seed", "3", "--out-dir", out, "--workers", "1"];
    args.extend(TINY);
    args.extend(extra);
    snode(&args)
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("delta");
    let b = dir.path().join("euler");
    let out = run_tiny("delta_snode", &a, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("delta_snode on vehicle: completed"));
    assert!(a.join("summary.json").exists() && a.join("metrics.csv").exists());
    assert!(run_tiny("bkpr_euler", &b, &[]).status.success());

    let csv = dir.path().join("table.csv");
    let out = snode(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("delta_snode") && table.contains("bkpr_euler"));
    assert!(table.contains("[fastest]"));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 3);
}

#[test]
fn recorded_failure_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny("bkpr_dopri5", dir.path(), &["max_steps=1"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("Fail"));
    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(summary.contains("\"outcome\": \"Fail\""));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_tiny("newton", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("delta_snode") && err.contains("adj_dopri5"), "{err}");

    let out = run_tiny("delta_snode", dir.path(), &["colour=red"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let out = snode(&["compare", dir.path().to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    assert_ne!(snode(&["compare"]).status.code(), Some(0));
    assert_ne!(snode(&["frobnicate"]).status.code(), Some(0));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# tiny multi-agent dataset\nscenario = multiagent\nn_agents = 3\nbatch = 2\nn_points = 11\nhorizon = 1\n").unwrap();
    let data = dir.path().join("ma.json");
    let out = snode(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "batch=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 samples x 11 times"));
    assert!(data.exists());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CSVS: [&str; 5] = [
    "metrics.csv",
    "portfolio_values.csv",
    "entropy.csv",
    "parental_membership.csv",
    "churn.csv",
];

fn sgdlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgdlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_inputs(dir: &Path) {
    fs::write(dir.join("sim.cfg"), "sim.n_series = 5\nsim.n_steps = 80\nsim.parents_per_series = 2\nrun.seed = 4\n").unwrap();
    fs::write(dir.join("model.cfg"), "preset = M1\nmc.n_draws = 200\nselection.core_target = 2\n").unwrap();
    let out = sgdlm(&["simulate", "--config", path(&dir.join("sim.cfg")), "--out", path(&dir.join("prices.csv"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn backtest(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let (config, prices, out_dir) = (dir.join("model.cfg"), dir.join("prices.csv"), dir.join(out));
    let mut args = vec!["backtest", "--config", path(&config), "--prices", path(&prices), "--out", path(&out_dir)];
    args.extend_from_slice(extra);
    sgdlm(&args)
}

#[test]
fn simulate_then_backtest_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let out = backtest(tmp.path(), "res", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in CSVS {
        assert!(tmp.path().join("res").join(name).is_file(), "{name} missing");
    }
    let values = fs::read_to_string(tmp.path().join("res/portfolio_values.csv")).unwrap();
    assert_eq!(values.lines().count(), 81);

    let report = sgdlm(&["report", "--out", path(&tmp.path().join("res"))]);
    assert_eq!(report.status.code(), Some(0));
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("log_likelihood") && text.contains("P1*"));
}

#[test]
fn identical_runs_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    assert!(backtest(tmp.path(), "a", &["--threads", "1"]).status.success());
    assert!(backtest(tmp.path(), "b", &["--threads", "3"]).status.success());
    for name in CSVS.iter().chain(&["run_report.txt"]) {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn seed_override_changes_draws_but_not_the_config_echo() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    assert!(backtest(tmp.path(), "a", &[]).status.success());
    assert!(backtest(tmp.path(), "b", &["--seed", "77"]).status.success());
    let read = |d: &str, f: &str| fs::read_to_string(tmp.path().join(d).join(f)).unwrap();
    assert_ne!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    let echo = |d: &str| read(d, "run_report.txt").split("\n[run]").next().unwrap().to_string();
    assert_eq!(echo("a"), echo("b"));
    assert!(read("b", "run_report.txt").contains("seed = 77"));
}

#[test]
fn missing_config_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let out = sgdlm(&[
        "backtest",
        "--config",
        path(&tmp.path().join("absent.cfg")),
        "--prices",
        path(&tmp.path().join("prices.csv")),
        "--out",
        path(&tmp.path().join("res")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error kind=input:"));
}

#[test]
fn malformed_prices_are_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    fs::write(tmp.path().join("prices.csv"), "date,A,B\n2020-01-02,1,2\n2020-01-03,x,2\n").unwrap();
    let out = backtest(tmp.path(), "res", &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sgdlm(&["backtest", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = sgdlm(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn report_on_missing_directory_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sgdlm(&["report", "--out", path(&tmp.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(2));
}

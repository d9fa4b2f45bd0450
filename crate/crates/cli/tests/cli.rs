use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn softspread(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softspread"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = softspread(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn moons(dir: &TempDir) -> PathBuf {
    ok(&["generate", "two-moons", "--n", "1000", "--noise", "0.1", "--seed", "7", "--out", "moons.csv"], dir.path());
    dir.path().join("moons.csv")
}

/// Record lines with the wall-clock column removed.
fn without_timing(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

fn rmse_column(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn generate_examples() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    let text = fs::read_to_string(dir.path().join("moons.csv")).unwrap();
    assert_eq!(text.lines().count(), 1001);
    ok(&["generate", "sine1d", "--n", "2000", "--lo", "0", "--hi", "10", "--out", "sine.bin"], dir.path());
    assert!(dir.path().join("sine.bin").metadata().unwrap().len() > 0);
}

#[test]
fn invalid_generate_spec_fails() {
    let dir = TempDir::new().unwrap();
    let out = softspread(&["generate", "two-moons", "--n", "0", "--out", "x.csv"], dir.path());
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = softspread(&["generate", "spiral", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    let args = |out: &'static str| {
        vec![
            "run", "--data", "moons.csv", "--k", "5", "--alpha", "0.9", "--budget", "100", "--checkpoints", "10",
            "--checkpoints", "100", "--reps", "2", "--seed", "3", "--out", out,
        ]
    };
    ok(&args("a.csv"), dir.path());
    ok(&args("b.csv"), dir.path());
    let a = without_timing(&dir.path().join("a.csv"));
    assert_eq!(a, without_timing(&dir.path().join("b.csv")));
    assert!(a[0].starts_with("# rng=chacha8"));
    assert_eq!(a.len(), 2 + 4);
}

#[test]
fn alpha_zero_matches_histogram() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    let common = ["--data", "moons.csv", "--budget", "0.5", "--checkpoints", "100", "--checkpoints", "500", "--seed", "9"];
    let mut pls = vec!["run", "--estimator", "pls", "--alpha", "0", "--out", "pls.csv"];
    pls.extend(common);
    let mut hist = vec!["run", "--estimator", "histogram", "--out", "hist.csv"];
    hist.extend(common);
    ok(&pls, dir.path());
    ok(&hist, dir.path());
    let (a, b) = (rmse_column(&dir.path().join("pls.csv")), rmse_column(&dir.path().join("hist.csv")));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-3, "{x} vs {y}");
    }
}

#[test]
fn fractional_budget_logs_rounded_count() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    ok(
        &["run", "--data", "moons.csv", "--budget", "0.10", "--out", "r.csv", "--events-out", "ev.csv"],
        dir.path(),
    );
    let events = fs::read_to_string(dir.path().join("ev.csv")).unwrap();
    assert_eq!(events.lines().count(), 1 + 100);
}

#[test]
fn estimator_parameters_must_match() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    for bad in [
        &["run", "--data", "moons.csv", "--estimator", "histogram", "--gamma", "1", "--budget", "10", "--out", "r.csv"][..],
        &["run", "--data", "moons.csv", "--estimator", "gkr", "--budget", "10", "--out", "r.csv"],
        &["run", "--data", "moons.csv", "--estimator", "knn", "--alpha", "0.5", "--neighbors", "3", "--budget", "10", "--out", "r.csv"],
    ] {
        let out = softspread(bad, dir.path());
        assert_eq!(out.status.code(), Some(1), "{bad:?}");
    }
    ok(&["run", "--data", "moons.csv", "--estimator", "gkr", "--gamma", "50", "--budget", "10", "--out", "r.csv"], dir.path());
}

#[test]
fn replay_reproduces_run_estimates() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    ok(
        &[
            "run", "--data", "moons.csv", "--k", "5", "--alpha", "0.9", "--budget", "50", "--out", "r.csv",
            "--estimates-out", "est.csv", "--events-out", "ev.csv",
        ],
        dir.path(),
    );
    ok(
        &["replay", "--data", "moons.csv", "--k", "5", "--alpha", "0.9", "--events", "ev.csv", "--out", "rep.csv"],
        dir.path(),
    );
    let a = fs::read_to_string(dir.path().join("est.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("rep.csv")).unwrap();
    for (x, y) in a.lines().zip(b.lines()).skip(1) {
        let parse = |l: &str| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>();
        for (u, v) in parse(x).iter().zip(parse(y)) {
            assert!((u - v).abs() <= 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn fresh_state_ci_is_vacuous() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    ok(&["ci", "--data", "moons.csv", "--method", "wilson", "--out", "ci.csv"], dir.path());
    let text = fs::read_to_string(dir.path().join("ci.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2000);
    assert!(rows.iter().all(|r| r.ends_with(",0,1,wilson")), "{}", rows[0]);
}

#[test]
fn unknown_ci_method_is_usage_error() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    let out = softspread(&["ci", "--data", "moons.csv", "--method", "bayes", "--out", "ci.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bayes"));
}

#[test]
fn wilson_on_sine_prints_coverage() {
    let dir = TempDir::new().unwrap();
    ok(&["generate", "sine1d", "--n", "2000", "--lo", "0", "--hi", "10", "--out", "sine.csv"], dir.path());
    let stdout = ok(
        &[
            "ci", "--data", "sine.csv", "--k", "20", "--alpha", "0.99", "--method", "wilson", "--z", "1.96",
            "--budget", "2000", "--out", "ci.csv",
        ],
        dir.path(),
    );
    let line = stdout.lines().find(|l| l.starts_with("coverage=")).expect("coverage line");
    let (counts, _) = line["coverage=".len()..].split_once(' ').unwrap();
    let (hit, total) = counts.split_once('/').unwrap();
    let (hit, total): (usize, usize) = (hit.parse().unwrap(), total.parse().unwrap());
    assert_eq!(total, 4000);
    let rows = fs::read_to_string(dir.path().join("ci.csv")).unwrap();
    let contained = rows.lines().count() - 1;
    assert_eq!(contained, total);
    assert!(hit <= total);
}

#[test]
fn hoeffding_needs_lipschitz() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    let out = softspread(&["ci", "--data", "moons.csv", "--method", "hoeffding", "--out", "ci.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    ok(
        &["ci", "--data", "moons.csv", "--method", "hoeffding", "--lipschitz", "1", "--budget", "20", "--out", "ci.csv"],
        dir.path(),
    );
}

#[test]
fn small_consistency_run() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&["consistency", "--ns", "200,400", "--reps", "2", "--seed", "4", "--out", "c.csv"], dir.path());
    assert_eq!(stdout.lines().filter(|l| l.starts_with("n=")).count(), 2);
    let text = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(text.starts_with("# rng="));
    assert_eq!(text.lines().count(), 2 + 4);
    let again = softspread(&["consistency", "--ns", "200,400", "--reps", "2", "--seed", "4", "--out", "d.csv"], dir.path());
    assert!(again.status.success());
    // wall_ms is the second to last column
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(dir.path().join(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                let n = f.len();
                f.remove(n - 2);
                f.join(",")
            })
            .collect()
    };
    assert_eq!(strip("c.csv"), strip("d.csv"));
}

#[test]
fn graph_command_writes_edges() {
    let dir = TempDir::new().unwrap();
    moons(&dir);
    let stdout = ok(&["graph", "--data", "moons.csv", "--graph", "knn", "--k", "5", "--out", "edges.csv"], dir.path());
    assert!(stdout.contains("nodes=1000"));
    let out = softspread(&["graph", "--data", "moons.csv", "--graph", "epsilon", "--out", "edges.csv"], dir.path());
    assert!(!out.status.success());
}

//! End-to-end checks of the compiled binary: exit codes, stream contents,
//! and run-to-run determinism.

use std::io::Write;
use std::process::{Command, Output};

use tempfile::TempDir;

fn drpo(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_drpo"));
    cmd.args(args);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary spawns")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

/// A five-asset moment file in the OR-Library layout.
fn write_orlibrary(dir: &TempDir) -> std::path::PathBuf {
    let path = dir.path().join("moments.txt");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "5").unwrap();
    for (mean, sd) in [
        (0.0042, 0.031),
        (0.0061, 0.024),
        (0.0019, 0.040),
        (0.0073, 0.036),
        (0.0055, 0.028),
    ] {
        writeln!(f, "{mean} {sd}").unwrap();
    }
    for i in 1..=5u32 {
        for j in (i + 1)..=5 {
            let rho = 0.1 + 0.03 * (i + j) as f64 / 10.0;
            writeln!(f, "{i} {j} {rho}").unwrap();
        }
    }
    path
}

/// A 30-period, 4-asset returns history with mild noise.
fn write_returns_csv(dir: &TempDir) -> std::path::PathBuf {
    let path = dir.path().join("history.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "date,A,B,C,D").unwrap();
    let mut state = 88172645463325252u64;
    let mut unit = move || {
        // xorshift into (0, 1); fixed so the fixture is stable
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for t in 0..30 {
        let row: Vec<String> = (0..4)
            .map(|a| format!("{:.6}", 0.002 * (a + 1) as f64 + 0.05 * (unit() - 0.5)))
            .collect();
        writeln!(f, "2021-{t:02},{}", row.join(",")).unwrap();
    }
    path
}

#[test]
fn solve_writes_result_json_and_exits_zero() {
    let dir = TempDir::new().unwrap();
    let source = write_orlibrary(&dir);
    let out = run(drpo(&["solve", "--k", "2"]).arg("--orlibrary").arg(&source));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["selection"].as_array().unwrap().len(), 2);
    assert_eq!(v["weights"].as_array().unwrap().len(), 5);
    assert!(v["gap_pct"].as_f64().unwrap() < 1e-3);
    assert_eq!(v["mode"], "single-tree");
}

#[test]
fn full_cardinality_solve_closes_the_gap_exactly() {
    let dir = TempDir::new().unwrap();
    let source = write_orlibrary(&dir);
    let out = run(drpo(&["solve", "--k", "5"]).arg("--orlibrary").arg(&source));
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["gap_pct"].as_f64().unwrap(), 0.0);
    assert_eq!(v["selection"].as_array().unwrap().len(), 5);
}

#[test]
fn identical_runs_differ_only_in_timing() {
    let dir = TempDir::new().unwrap();
    let source = write_orlibrary(&dir);
    let trace_a = dir.path().join("a.ldjson");
    let trace_b = dir.path().join("b.ldjson");
    let mut go = |trace: &std::path::Path| {
        let out = run(drpo(&["solve", "--k", "2"])
            .arg("--orlibrary")
            .arg(&source)
            .arg("--trace")
            .arg(trace));
        assert!(out.status.success());
        let mut v = stdout_json(&out);
        v.as_object_mut().unwrap().remove("time_s");
        v
    };
    assert_eq!(go(&trace_a), go(&trace_b));
    let a = std::fs::read(&trace_a).unwrap();
    let b = std::fs::read(&trace_b).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "trace files must be byte-identical");
}

#[test]
fn missing_source_is_a_validation_failure_with_json_stderr() {
    let out = run(&mut drpo(&["solve", "--k", "2"]));
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
    assert!(err["error"].as_str().unwrap().contains("--returns or --orlibrary"));
}

#[test]
fn both_sources_are_rejected() {
    let dir = TempDir::new().unwrap();
    let source = write_orlibrary(&dir);
    let history = write_returns_csv(&dir);
    let out = run(drpo(&["solve", "--k", "2"])
        .arg("--orlibrary")
        .arg(&source)
        .arg("--returns")
        .arg(&history));
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
}

#[test]
fn zero_time_limit_reports_the_incumbent_and_exits_three() {
    let dir = TempDir::new().unwrap();
    let source = write_orlibrary(&dir);
    let out = run(drpo(&["solve", "--k", "2", "--time-limit", "0"])
        .arg("--orlibrary")
        .arg(&source));
    assert_eq!(out.status.code(), Some(3));
    let v = stdout_json(&out);
    assert_eq!(v["selection"].as_array().unwrap().len(), 2);
    assert!(v["gap_pct"].as_f64().unwrap() > 0.0);
}

#[test]
fn time_limit_env_var_overrides_the_flag() {
    let dir = TempDir::new().unwrap();
    let source = write_orlibrary(&dir);
    let out = run(drpo(&["solve", "--k", "2", "--time-limit", "3600"])
        .arg("--orlibrary")
        .arg(&source)
        .env("DRPO_TIME_LIMIT", "0"));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn backtest_report_and_csv_agree() {
    let dir = TempDir::new().unwrap();
    let history = write_returns_csv(&dir);
    let report_path = dir.path().join("report.json");
    let csv_path = dir.path().join("returns.csv");
    let out = run(drpo(&[
        "backtest", "--k", "2", "--strategy", "mv", "--train", "10", "--test", "5", "--step", "5",
    ])
    .arg("--returns")
    .arg(&history)
    .arg("--output")
    .arg(&report_path)
    .arg("--csv")
    .arg(&csv_path));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    // 30 periods, train 10 / test 5 / step 5 → windows at 0, 5, 10, 15
    let windows = report["windows"].as_array().unwrap();
    assert_eq!(windows.len(), 4);
    assert_eq!(report["partial"], false);
    let returns = report["returns"].as_array().unwrap();
    assert_eq!(returns.len(), 20);

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("window,period,return"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), returns.len());
    for (row, expect) in rows.iter().zip(returns) {
        let r: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(r, expect.as_f64().unwrap());
    }
    // no look-ahead: each window tests strictly after its training slice
    for (i, w) in windows.iter().enumerate() {
        assert_eq!(w["train_start"].as_u64().unwrap(), 5 * i as u64);
        assert_eq!(w["test_start"].as_u64().unwrap(), 5 * i as u64 + 10);
    }
}

#[test]
fn backtest_rejects_short_histories() {
    let dir = TempDir::new().unwrap();
    let history = write_returns_csv(&dir);
    let out = run(drpo(&["backtest", "--k", "2", "--train", "100", "--test", "52"])
        .arg("--returns")
        .arg(&history));
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "validation");
}

#[test]
fn bench_prints_the_expected_columns() {
    let out = run(&mut drpo(&[
        "bench", "--n", "6", "--k", "2", "--kappa2", "4", "--gamma-scaled", "10",
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let header = text.lines().next().unwrap();
    for label in ["Obj", "Gap(%)", "Time", "#Cuts", "#Nodes"] {
        assert!(header.contains(label), "header {header:?} lacks {label}");
    }
    assert_eq!(text.lines().count(), 2, "one sweep row expected:\n{text}");
}

#[test]
fn verify_reports_one_line_per_instance() {
    let out = run(&mut drpo(&["verify", "--n", "5", "--k", "2", "--instances", "2"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("— pass").count(), 2, "{text}");
    assert!(text.contains("2/2 matched"));
}

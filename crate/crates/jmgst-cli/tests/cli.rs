//! End-to-end tests of the installed binary: artifact determinism, input
//! validation and exit codes, and the shape of the files each subcommand
//! writes.

use jmgst::config::RunConfig;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jmgst"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "exit code mismatch\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A small, fast configuration for pipeline tests.
fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::reference();
    cfg.n_patients = 80;
    cfg.replicates = 20;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_code(&run(&["--config", &cfg, "--out", a.to_str().unwrap(), "simulate"]), 0);
    assert_code(&run(&["--config", &cfg, "--out", b.to_str().unwrap(), "simulate"]), 0);
    assert_eq!(read(&a.join("patients.csv")), read(&b.join("patients.csv")));
    assert_eq!(read(&a.join("visits.csv")), read(&b.join("visits.csv")));
    assert_code(
        &run(&["--config", &cfg, "--seed", "999", "--out", c.to_str().unwrap(), "simulate"]),
        0,
    );
    assert_ne!(read(&a.join("patients.csv")), read(&c.join("patients.csv")));
    let header = String::from_utf8(read(&c.join("patients.csv"))).unwrap();
    assert!(header.starts_with("# "), "artifact carries a provenance header");
    assert!(header.lines().next().unwrap().contains("seed=999"));
}

#[test]
fn fit_output_is_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let trial = tmp.path().join("trial");
    assert_code(&run(&["--config", &cfg, "--out", trial.to_str().unwrap(), "simulate"]), 0);
    let f1 = tmp.path().join("f1");
    let f2 = tmp.path().join("f2");
    for f in [&f1, &f2] {
        assert_code(
            &run(&[
                "--config",
                &cfg,
                "--out",
                f.to_str().unwrap(),
                "fit",
                "--trial",
                trial.to_str().unwrap(),
                "--analysis",
                "3",
            ]),
            0,
        );
    }
    let j1 = read(&f1.join("fit.json"));
    assert_eq!(j1, read(&f2.join("fit.json")));
    let doc: serde_json::Value = serde_json::from_slice(&j1).unwrap();
    assert_eq!(doc["analysis"], 3);
    assert_eq!(doc["fits"].as_array().unwrap().len(), 3);
    assert_eq!(doc["z"].as_array().unwrap().len(), 3);
    // The covariance is upper-triangular in (k1, k2) with positive diagonal.
    let cov = doc["eta_covariance"].as_array().unwrap();
    for (k, row) in cov.iter().enumerate() {
        assert!(row[k].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn fit_rejects_out_of_range_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let trial = tmp.path().join("trial");
    assert_code(&run(&["--config", &cfg, "--out", trial.to_str().unwrap(), "simulate"]), 0);
    let out = run(&[
        "--config",
        &cfg,
        "fit",
        "--trial",
        trial.to_str().unwrap(),
        "--analysis",
        "9",
    ]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("out of range"), "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_visits_csv_is_reported_with_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let trial = tmp.path().join("trial");
    assert_code(&run(&["--config", &cfg, "--out", trial.to_str().unwrap(), "simulate"]), 0);
    let visits = trial.join("visits.csv");
    let mut lines: Vec<String> =
        String::from_utf8(read(&visits)).unwrap().lines().map(str::to_owned).collect();
    // Line 1 is the provenance comment, line 2 the column header; line 4 is
    // the second data row.
    lines[3] = "0,abc,1.0".into();
    fs::write(&visits, lines.join("\n") + "\n").unwrap();
    let out = run(&[
        "--config",
        &cfg,
        "fit",
        "--trial",
        trial.to_str().unwrap(),
        "--analysis",
        "1",
    ]);
    assert_code(&out, 1);
    let err = stderr(&out);
    assert!(err.contains("visits.csv line 4"), "stderr: {err}");
    assert!(err.contains("bad number"), "stderr: {err}");
}

#[test]
fn single_analysis_design_reduces_to_the_fixed_sample_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::reference();
    cfg.design.analysis_times = vec![3.0];
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out_dir = tmp.path().join("design");
    assert_code(
        &run(&[
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "design",
        ]),
        0,
    );
    let csv = String::from_utf8(read(&out_dir.join("boundaries.csv"))).unwrap();
    let data: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(data.len(), 1, "one analysis, one boundary row:\n{csv}");
    let cols: Vec<&str> = data[0].split(',').collect();
    let lower: f64 = cols[2].parse().unwrap();
    let upper: f64 = cols[3].parse().unwrap();
    let spent: f64 = cols[4].parse().unwrap();
    // With a single look the efficacy bound is the one-sided 2.5% normal
    // quantile and the futility bound coincides with it.
    assert!((upper - 1.959_963_985).abs() < 1e-6, "upper = {upper}");
    assert_eq!(lower, upper);
    assert!((spent - 0.025).abs() < 1e-12);
}

#[test]
fn oc_records_boundary_failures_under_extreme_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::reference();
    cfg.model.h0 = 5.5;
    cfg.model.sigma_sq = 100.0;
    cfg.model.gamma = 0.0;
    cfg.model.eta = 0.0;
    cfg.replicates = 40;
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out_dir = tmp.path().join("oc");
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "oc",
        "--methods",
        "cscore-m2",
    ]);
    assert_code(&out, 0);
    let csv = String::from_utf8(read(&out_dir.join("oc.csv"))).unwrap();
    let row: Vec<&str> = csv.lines().nth(2).expect("one method row").split(',').collect();
    assert_eq!(row[0], "cscore-m2");
    let failure_rate: f64 = row[6].parse().unwrap();
    assert!(
        failure_rate > 0.1,
        "direct-covariance boundaries should fail often here, got {failure_rate}"
    );
    assert!(out_dir.join("oc.json").exists());
}

#[test]
fn unknown_method_is_a_validation_error() {
    let out = run(&["oc", "--methods", "bogus"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("unknown method"), "stderr: {}", stderr(&out));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::reference();
    cfg.n_patients = 1;
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = run(&["--config", cfg_path.to_str().unwrap(), "design"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("n_patients"), "stderr: {}", stderr(&out));
}

#[test]
fn verify_battery_passes_and_writes_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("verify");
    let out = run(&["--out", out_dir.to_str().unwrap(), "verify"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("verification passed"), "stdout: {}", stdout(&out));
    let doc: serde_json::Value =
        serde_json::from_slice(&read(&out_dir.join("verify.json"))).unwrap();
    assert_eq!(doc["summary"]["passed"], true);
}

#[test]
fn help_is_a_success() {
    let out = run(&["--help"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("jmgst"));
}

use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn droop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droop")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &tempfile::TempDir, body: &str) -> PathBuf {
    let path = dir.path().join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_SWEEP: &str = r#"{
  "system": "single_inverter",
  "chi": 0.5, "B": 1.5, "Pd": 0.0,
  "x": { "path": "Pd", "min": 0.0, "max": 3.0, "count": 13 },
  "y": { "path": "chi", "min": 0.2, "max": 1.0, "count": 5 }
}"#;

#[test]
fn fixed_point_reports_a_converged_equilibrium() {
    let out = droop(&["fixed-point", "--config", config("three_bus.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let eq = &v[0]["equilibrium"];
    assert_eq!(eq["E"].as_array().unwrap().len(), 3);
    assert!(eq["residual_norm"].as_f64().unwrap() < 1e-8);
}

#[test]
fn stability_verdict_is_reported() {
    let out = droop(&["stability", "--config", config("three_bus.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v[0]["stability"]["verdict"], "stable");
    assert_eq!(v[0]["stability"]["zero_mode_excluded"], true);
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, SMALL_SWEEP);
    let csv = dir.path().join("map.csv");
    let out = droop(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x,y,n_stable,dominant_re,dominant_im,delta_star,E_star,cor1,cor2,cor3,cor4,cor5,lemma2_I,lemma2_II"
    );
    assert_eq!(lines.count(), 13 * 5);
}

#[test]
fn separatrix_of_a_power_limit_is_nonempty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, SMALL_SWEEP);
    let out = droop(&["separatrix", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("line,x,y"));
    assert!(text.lines().count() > 3);
}

#[test]
fn audit_finds_no_violations() {
    let out = droop(&[
        "audit",
        "--config",
        config("three_bus_sweep.json").to_str().unwrap(),
        "--criterion",
        "cor4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let report = &v[0];
    assert_eq!(report["criterion"], "cor4");
    assert_eq!(report["violations"], 0);
    let coverage = report["coverage"].as_f64().unwrap();
    assert!(coverage > 0.0 && coverage <= 1.0);
}

#[test]
fn per_cell_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, &SMALL_SWEEP.replace(r#""min": 0.2"#, r#""min": 0.0"#));
    let out = droop(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    // failed cells are still written, with empty fields
    assert_eq!(stdout(&out).lines().count(), 1 + 13 * 5);
}

#[test]
fn invalid_configurations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(
        droop(&["sweep", "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(droop(&["sweep"]).status.code(), Some(2));

    let cfg = write_config(&dir, "{ not json");
    assert_eq!(
        droop(&["fixed-point", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let cfg = write_config(&dir, &SMALL_SWEEP.replace(r#""path": "Pd""#, r#""path": "Q""#));
    let out = droop(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`Q`"));

    let cfg = write_config(&dir, &SMALL_SWEEP.replace(r#""count": 13"#, r#""count": 0"#));
    assert_eq!(
        droop(&["sweep", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn simulation_reports_segment_classes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("traj.csv");
    let cfg = config("single_inverter_chi_steps.json");
    let out = droop(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().next(), Some("t,delta_0,delta_1,omega_0,omega_1,E_0,E_1"));
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("segment [").count(), 3);
}

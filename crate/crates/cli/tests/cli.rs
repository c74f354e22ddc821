//! Command-line behavior: exit codes, JSON output, and bundle reporting.

use std::path::Path;
use std::process::Command;

fn magnav(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_magnav"))
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for name in ["scenarios/sim-obstacle.toml", "scenarios/real-repetition.toml"] {
        let out = magnav(&["validate", name]);
        assert!(out.status.success(), "{name} should validate");
    }
}

#[test]
fn validate_rejects_bad_scenario_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        r#"
name = "bad"
units = "cm"
[workspace]
min = [0.0, 0.0, 0.0]
max = [10.0, 10.0, 10.0]
[initial]
ipm_position = [49.0, -6.0, 3.0]
joint_angles = [0.0, -0.6, 0.0, -2.0, 0.0, 1.6, 0.0]
[goal]
ipm_position = [49.0, 2.0, 3.0]
"#,
    )
    .unwrap();
    let out = magnav(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("workspace"), "got: {stderr}");
}

#[test]
fn validate_json_reports_validity() {
    let out = magnav(&["--json", "validate", "scenarios/real-repetition.toml"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["valid"], true);
    assert_eq!(v["name"], "real-repetition");
}

#[test]
fn missing_scenario_file_fails_with_error() {
    let out = magnav(&["plan", "scenarios/does-not-exist.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn plan_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle");
    let out = magnav(&[
        "plan",
        "scenarios/real-repetition.toml",
        "-o",
        bundle.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(
        out.status.success(),
        "plan failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["trajectory.csv", "gains.bin", "gains.json", "scenario.toml", "report.json"] {
        assert!(bundle.join(file).exists(), "missing {file}");
    }

    let out = magnav(&["--json", "report", bundle.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["scenario_name"], "real-repetition");
    assert_eq!(v["report"]["solver"]["status"], "converged");
}

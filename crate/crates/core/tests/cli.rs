use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qbxfmm"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qbxfmm-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn green_test_report_is_reproducible() {
    let mut reports = Vec::new();
    for k in 0..2 {
        let path = scratch(&format!("green{k}.json"));
        let st = bin()
            .args(["--threads", "1", "green-test", "--profile", "e4", "--targets", "none", "--no-point-fmm", "--seed", "3"])
            .arg("--report")
            .arg(&path)
            .status()
            .unwrap();
        assert!(st.success());
        assert!(path.with_extension("timings.json").exists());
        reports.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let v: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert!(v["boundary_error"].as_f64().unwrap() < 5e-3);
}

#[test]
fn tolerance_failure_sets_exit_code() {
    let out = bin()
        .args(["green-test", "--profile", "e4", "--targets", "none", "--no-point-fmm", "--tol", "1e-15"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_curve_file_is_reported() {
    let path = scratch("bad_curve.txt");
    std::fs::write(&path, "0 1.0 0.0\n").unwrap();
    let out = bin().args(["refine", "--curve"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse"));
}

#[test]
fn unknown_profile_is_rejected() {
    let out = bin().args(["refine", "--profile", "e5"]).output().unwrap();
    assert!(!out.status.success());
}

use std::fs;
use std::process::Command;

fn icn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icn"))
}

const SMALL: &str = "task = synthetic2d\nmode = binary\n[train]\nrounds = 2\npatience = none\n[oracle]\nresolution = 16\n";

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let status = icn().args(["train", "--config"]).arg(&cfg).args(["--seed", "3", "--out"]).arg(&out).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("metrics.csv").exists());
    assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("seed = 3"));
    let report = icn().arg("report").arg(&out).output().unwrap();
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("test_err"));
}

#[test]
fn invalid_config_exits_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "task = synthetic2d\nmode = binary\n[train]\nalpha = 2\n").unwrap();
    let out = icn().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    let missing = icn().args(["train", "--config", "/definitely/not/here"]).output().unwrap();
    assert!(!missing.status.success());
    let unknown = icn().arg("frobnicate").output().unwrap();
    assert!(!unknown.status.success());
}

#[test]
fn oracle_verify_reports_a_tiny_residual() {
    let dir = tempfile::tempdir().unwrap();
    let out = icn().args(["oracle-verify", "--pairs", "3", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let residual: f64 = text.split("max |residual| ").nth(1).unwrap().trim().parse().unwrap();
    assert!(residual < 1e-9, "{text}");
    assert!(dir.path().join("kl_identity.csv").exists());
}

#[test]
fn adversarial_on_synthetic_data_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("adv.txt");
    fs::write(&cfg, format!("{SMALL}[adversarial]\nepsilon = 0.3\n")).unwrap();
    let out = icn().args(["adversarial", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("adv")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("adv/fooling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

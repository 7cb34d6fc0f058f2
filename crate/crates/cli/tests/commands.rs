use std::fs;
use std::process::Command;

fn nnpsf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nnpsf"))
}

#[test]
fn check_passes() {
    let out = nnpsf().arg("check").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 3);
}

#[test]
fn simulate_writes_a_trajectory_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (traj, diag) = (dir.path().join("t.csv"), dir.path().join("d.csv"));
    let status = nnpsf()
        .args(["simulate", "--case", "2", "--scheme", "safe-sc-ilqr", "--sigma", "0.1", "--seed", "4", "--out"])
        .arg(&traj)
        .arg("--diagnostics")
        .arg(&diag)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&traj).unwrap();
    assert!(text.starts_with("k,theta,theta_dot,u_ref,u,cert,max_slack"));
    assert_eq!(text.lines().count(), 42);
    assert!(fs::read_to_string(&diag).unwrap().lines().count() > 40);
}

#[test]
fn export_dataset_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let out = nnpsf().args(["export-dataset", "--duration", "2", "--out"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 41);
}

#[test]
fn dump_qp_writes_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let (qp, bounds) = (dir.path().join("qp.txt"), dir.path().join("b.csv"));
    let out = nnpsf().args(["dump-qp", "--case", "3", "--out"]).arg(&qp).arg("--bounds-csv").arg(&bounds).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::metadata(&qp).unwrap().len() > 0);
    assert!(fs::read_to_string(&bounds).unwrap().starts_with("step,row,col"));
}

#[test]
fn config_overrides_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"filter": {"horizn": 4}}"#).unwrap();
    let out = nnpsf().arg("--config").arg(&typo).arg("check").output().unwrap();
    assert!(!out.status.success());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"filter": {"growth": 0.5}}"#).unwrap();
    assert!(!nnpsf().arg("--config").arg(&bad).arg("check").output().unwrap().status.success());

    let good = dir.path().join("good.json");
    fs::write(&good, r#"{"filter": {"horizon": 4}, "seeds": [1]}"#).unwrap();
    assert!(nnpsf().arg("--config").arg(&good).arg("check").status().unwrap().success());
}

#[test]
fn unknown_scheme_is_rejected() {
    let out = nnpsf().args(["simulate", "--case", "1", "--scheme", "mpc"]).output().unwrap();
    assert!(!out.status.success());
}

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graftpay"))
}

fn scenario(name: &str) -> String {
    format!("{}/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn capacity_matches_inferred_request_size() {
    for (bw, n) in [("100", "5000"), ("200", "10000")] {
        let out = bin().args(["capacity", "--bandwidth", bw, "--L", "80000", "--Tb", "4", "--format", "json"]).output().unwrap();
        assert!(out.status.success());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["max_requests"].to_string(), n);
    }
}

#[test]
fn run_writes_report_events_and_wallets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.jsonl");
    let events = dir.path().join("events.jsonl");
    let wallets = dir.path().join("wallets");
    let status = bin()
        .args(["run", &scenario("demo.toml"), "--seed", "3", "--format", "jsonl", "--out"])
        .arg(&out)
        .arg("--events")
        .arg(&events)
        .arg("--save-wallets")
        .arg(&wallets)
        .status()
        .unwrap();
    assert!(status.success());
    let report = std::fs::read_to_string(&out).unwrap();
    assert!(report.lines().next().unwrap().contains("\"seed\":3"));
    assert!(std::fs::read_to_string(&events).unwrap().lines().count() > 3);
    let snap = std::fs::read_to_string(wallets.join("wallet-0.json")).unwrap();
    assert!(snap.contains("master_seed"));
}

#[test]
fn config_errors_exit_two() {
    let out = bin().args(["run", &scenario("demo.toml"), "--attack", "compromise_signer(11)"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lost_liveness_exits_one() {
    let out = bin().args(["run", &scenario("demo.toml"), "--attack", "compromise_signer(6)"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("liveness"));
}

#[test]
fn demo_passes() {
    let out = bin().arg("demo").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vguard"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_run(out: &Path) -> Output {
    vguard(&[
        "run",
        "--beta",
        "50",
        "--delta-ms",
        "50",
        "--duration",
        "300",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn run_writes_reports_and_verifiable_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let out = small_run(dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("checks passed"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ok"], true);
    assert!(dir.path().join("report.csv").exists());

    for node in 0..4 {
        let ledger = dir.path().join(format!("ledger-{node}.jsonl"));
        let v = vguard(&["verify", "--full", ledger.to_str().unwrap()]);
        assert!(
            v.status.success(),
            "node {node}: {}",
            String::from_utf8_lossy(&v.stderr)
        );
        assert!(String::from_utf8_lossy(&v.stdout).starts_with("ok:"));
    }
}

#[test]
fn verify_rejects_an_edited_ledger() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_run(dir.path()).status.success());
    let path = dir.path().join("ledger-0.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let last = text.lines().last().unwrap();
    // Flip one hex digit of the first payload in the last window.
    let pos = last
        .find("\"payload\":\"")
        .expect("committed windows carry payloads")
        + 11;
    let mut edited = last.to_string();
    let old = edited.as_bytes()[pos];
    edited.replace_range(pos..pos + 1, if old == b'0' { "1" } else { "0" });
    fs::write(&path, text.replacen(last, &edited, 1)).unwrap();

    let v = vguard(&["verify", path.to_str().unwrap()]);
    assert!(!v.status.success());
}

#[test]
fn sweep_rejects_unsorted_values() {
    let dir = tempfile::tempdir().unwrap();
    let v = vguard(&[
        "sweep",
        "--axis",
        "beta",
        "--values",
        "200,100",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!v.status.success());
    assert!(String::from_utf8_lossy(&v.stderr).contains("ascending"));
}

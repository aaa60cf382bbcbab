use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cas")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"{"stream":{"kind":"circular","n_days":30},"L":5}"#;

#[test]
fn run_writes_files_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cas(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["records.csv", "age_curve.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("records.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "m,n,age,F_raw,F_norm,F_mean,F_cov,F_weight");
    assert_eq!(csv.lines().count(), 1 + 30 * 31 / 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"stream":{"kind":"circular"},"L":0}"#);
    assert_eq!(cas(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cas(&["run", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(cas(&["bogus"]).status.code(), Some(2));

    let random = write_config(
        dir.path(),
        "r.json",
        r#"{"stream":{"kind":"embedded","K":3,"d":4,"n_days":10,
            "nuisance":{"type":"random_walk","speed":0.1,"seed":0}},"L":5}"#,
    );
    assert_eq!(cas(&["run", "--config", random.to_str().unwrap()]).status.code(), Some(2));
    assert!(cas(&["run", "--config", random.to_str().unwrap(), "--seed", "3"]).status.success());

    // Two L values give a degenerate capacity fit: numerical failure.
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let o = cas(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "L", "--values", "4,5"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cas(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "nope", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_reports_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"stream":{"kind":"circular"}}"#);
    let o = cas(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "L", "--values", "5,10,20"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let hl: Vec<u64> = v["rows"].as_array().unwrap().iter().map(|r| r["summary"]["half_life"].as_u64().unwrap()).collect();
    assert_eq!(hl, vec![14, 30, 51]);
    let c = v["capacity"]["c"].as_f64().unwrap();
    assert!(c > 2.0 && c < 3.0, "{c}");
}

#[test]
fn fifo_half_life_equals_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let o = cas(&["fifo", "--config", cfg.to_str().unwrap(), "--L", "7"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["half_life"], 7);
}

#[test]
fn snapshot_restore_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let c = cfg.to_str().unwrap();
    let full = dir.path().join("full");
    assert!(cas(&["run", "--config", c, "--out", full.to_str().unwrap()]).status.success());
    let snap = dir.path().join("s.json");
    assert!(cas(&["snapshot", "--config", c, "--day", "12", "--out", snap.to_str().unwrap()]).status.success());
    let o = cas(&["restore", "--config", c, "--snapshot", snap.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let full_csv = std::fs::read_to_string(full.join("records.csv")).unwrap();
    let tail: Vec<&str> = full_csv
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap() > 12)
        .collect();
    let restored = String::from_utf8(o.stdout).unwrap();
    let got: Vec<&str> = restored.lines().skip(1).collect();
    assert_eq!(got, tail);

    std::fs::write(&snap, "{\"version\": 9}").unwrap();
    assert_eq!(cas(&["restore", "--config", c, "--snapshot", snap.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn movie_and_drift_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let c = cfg.to_str().unwrap();
    let frames = dir.path().join("f.json");
    let traj = dir.path().join("t.csv");
    let o = cas(&[
        "movie", "--config", c, "--frames", "6", "--out", frames.to_str().unwrap(),
        "--trajectories", traj.to_str().unwrap(), "--paths", "3", "--steps", "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(frames).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
    let csv = std::fs::read_to_string(traj).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "path_id,step,t,x_0,x_1");
    assert_eq!(csv.lines().count(), 1 + 3 * 11);

    let o = cas(&["drift-check", "--config", c, "--t", "0.3,0.7", "--points", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["residuals"].as_array().unwrap().len(), 2);
    assert!(v["max_relative"].as_f64().unwrap() < 1e-3);
}

#[test]
fn stream_export_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let o = cas(&["stream", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().map(Vec::len), Some(30));
}

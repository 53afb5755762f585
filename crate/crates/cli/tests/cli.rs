use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn brave(dir: &Path, config: Value, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_brave"))
        .arg("--config")
        .arg(&path)
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn quadratic(rounds: u64) -> Value {
    json!({
        "rounds": rounds, "group_bits": 64,
        "task": {"kind": "quadratic", "dim": 16, "per_participant": 20},
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn quadratic_run_agrees_and_writes_one_line_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = brave(dir.path(), quadratic(50), &["--out", "m.jsonl"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 50);
    for (t, line) in metrics.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["round"], t as u64);
        assert_eq!(v["status"], "completed");
        assert!(v.get("wall_ms").is_none());
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["agreement_violations"], 0);
    assert_eq!(summary["blames"], json!([]));
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"rounds": 4, "group_bits": 64, "seed": 9, "attack": "gaussian:1", "baseline": true,
        "task": {"kind": "logistic", "dim": 3, "per_participant": 30, "test_size": 50}});
    let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
    assert!(brave(dir.path(), cfg.clone(), &["--out", "a.jsonl"]).status.success());
    assert!(brave(dir.path(), cfg.clone(), &["--out", "b.jsonl"]).status.success());
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.summary.json"), read("b.summary.json"));
    assert!(brave(dir.path(), cfg, &["--out", "c.jsonl", "--seed", "10"]).status.success());
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn warns_when_resilience_condition_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = brave(dir.path(), quadratic(1), &["--f", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("warning: n = 10 <= 3f + 2 = 11"), "{}", stderr(&out));
    let out = brave(dir.path(), quadratic(1), &["--f", "2"]);
    assert!(!stderr(&out).contains("warning"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = brave(dir.path(), quadratic(1), &["--f", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("f: must be non-negative"), "{}", stderr(&out));
    let out = brave(dir.path(), json!({"task": {"kind": "quadratic", "noise": "loud"}}), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("task.noise"), "{}", stderr(&out));
    let out = brave(dir.path(), quadratic(1), &["--attack", "meteor"]);
    assert_eq!(out.status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_brave"))
        .args(["--config", "/nonexistent/brave.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn halt_exits_with_3_and_retry_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let out = brave(dir.path(), quadratic(2), &["--attack", "inconsistentcloak", "--out", "h.jsonl"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("h.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["status"], "halted");
    assert_eq!(first["blamed"], json!([8, 9]));

    let out = brave(
        dir.path(),
        quadratic(2),
        &["--attack", "inconsistentcloak", "--policy", "exclude-retry", "--out", "r.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["status"], "completed");
    assert_eq!(first["retried"], true);
}

#[test]
fn wall_time_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let out = brave(dir.path(), quadratic(1), &["--wall-time", "--out", "w.jsonl"]);
    assert!(out.status.success());
    let line = fs::read_to_string(dir.path().join("w.jsonl")).unwrap();
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["wall_ms"].as_f64().unwrap() > 0.0);
}

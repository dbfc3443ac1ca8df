use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn ttzo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttzo")).arg("--quiet").args(args).output().expect("spawn ttzo")
}

fn json(path: &std::path::Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_header_and_one_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = fixture("blobs_default.cfg");
    let o = ttzo(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1001);
    assert_eq!(lines[0]["header"]["run_seed"], 7);
    assert_eq!(lines[0]["header"]["config"]["train"]["seed"], 7);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["steps_run"], 1000);
    assert_eq!(summary["diverged"], false);
    assert_eq!(summary["frozen_intact"], true);
}

#[test]
fn diverging_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("unstable_fixed.cfg");
    let o = ttzo(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["diverged"], true);
    assert_eq!(summary["frozen_intact"], true);
}

#[test]
fn malformed_config_exits_1_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let cfg = fixture("malformed.cfg");
    let o = ttzo(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    assert!(!out.exists());
}

#[test]
fn bad_flags_exit_1() {
    assert_eq!(ttzo(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ttzo(&["--help"]).status.code(), Some(0));
}

#[test]
fn compare_rejects_zero_seeds() {
    let cfg = fixture("blobs_default.cfg");
    let c = cfg.to_str().unwrap();
    let o = ttzo(&["compare", "--a", c, "--b", c, "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_identical_arms_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.cfg");
    std::fs::write(&cfg, "train.steps = 60\ntask.samples = 128\ntask.threshold = 0.8\n").unwrap();
    let report = dir.path().join("cmp.json");
    let c = cfg.to_str().unwrap();
    let o = ttzo(&["compare", "--a", c, "--b", c, "--seeds", "3", "--out", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&report);
    assert_eq!(r["seeds"], 3);
    let arms = r["arms"].as_array().unwrap();
    assert_eq!(arms[0]["median_steps_to_threshold"], arms[1]["median_steps_to_threshold"]);
    assert_eq!(arms[0]["divergence_rate"], arms[1]["divergence_rate"]);
}

#[test]
fn variance_refuses_few_trials() {
    assert_eq!(ttzo(&["variance", "--trials", "10"]).status.code(), Some(1));
}

#[test]
fn variance_table_has_a_row_per_dim_and_q() {
    let o = ttzo(&["variance", "--trials", "1000", "--dims", "10,20", "--q", "1,4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn contract_bench_emits_every_combination() {
    let o = ttzo(&["contract-bench", "--ranks", "2,5", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 8 * 2 * 3);
    assert_eq!(ttzo(&["contract-bench", "--rows", "8"]).status.code(), Some(1));
}

#[test]
fn verify_passes_and_covers_every_module() {
    let o = ttzo(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    let checks = report["checks"].as_array().unwrap();
    for module in ["tensor_train", "adapters", "toy_models", "zo_engine", "bench_cli"] {
        assert!(checks.iter().any(|c| c["module"] == module), "{module}");
    }
}

#[test]
fn verify_catches_a_corrupted_golden_table() {
    let dir = tempfile::tempdir().unwrap();
    let good =
        std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/golden_normals.txt"))
            .unwrap();
    let bad = good.replacen("bfe9edc0972ca3e0", "bfe9edc0972ca4e0", 1);
    assert_ne!(good, bad);
    let path = dir.path().join("golden.txt");
    std::fs::write(&path, bad).unwrap();
    let o = ttzo(&["verify", "--golden", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("golden_normals"));
}

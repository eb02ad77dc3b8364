use std::path::Path;
use std::process::{Command, Output};

fn sflguard(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sflguard"))
        .args(args)
        .env("SFLGUARD_OUT_DIR", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SHORT: [&str; 8] = ["--set", "rounds=3", "--set", "defense=\"full\"", "--set", "warmup_rounds=1", "--set", "refresh_every=2"];

#[test]
fn run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--preset", "desk", "--name", "short"];
    args.extend(SHORT);
    let o = sflguard(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("short.csv")).unwrap();
    assert!(csv.starts_with("# sflguard metrics schema 1\n"));
    assert!(csv.contains("# rounds = 3"));
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("round,attack,adaptive,defense,accuracy"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("short.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 3);
    assert_eq!(summary["config"]["attack"], "DP+SP");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--preset", "desk", "--name", "det", "--set", "seed=7"];
    args.extend(SHORT);
    assert!(sflguard(&args, a.path()).status.success());
    assert!(sflguard(&args, b.path()).status.success());
    let read = |d: &Path| std::fs::read(d.join("det.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn unknown_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = sflguard(&["run", "--set", "roundz=3"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("roundz"));
}

#[test]
fn range_error_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = sflguard(&["run", "--set", "malicious_ratio=1.5", "--dry-run"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("malicious_ratio"));
}

#[test]
fn empty_config_file_resolves_to_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, "").unwrap();
    let o = sflguard(&["run", "--config", cfg.to_str().unwrap(), "--dry-run"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for line in ["clients = 10", "malicious_ratio = 0.2", "rounds = 100", "batch_size = 64", "attack = \"DP+SP\""] {
        assert!(text.contains(line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn sweep_runs_each_seed_in_its_own_process() {
    let dir = tempfile::tempdir().unwrap();
    let o = sflguard(&["sweep", "--preset", "desk", "--seeds", "2", "--set", "rounds=2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 0..2 {
        assert!(dir.path().join(format!("sweep-seed{seed}.csv")).exists());
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn theorem_reports_the_reference_factor() {
    let dir = tempfile::tempdir().unwrap();
    let o = sflguard(&["theorem", "--seeds", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("= 0.0256"));
    assert!(dir.path().join("theorem.json").exists());
}

#[test]
fn detect_bench_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = sflguard(&["detect-bench", "--seeds", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("detect_bench.json")).unwrap()).unwrap();
    assert_eq!(report["trials"].as_array().unwrap().len(), 1);
    assert!(report["mean_recall"].as_f64().unwrap() > 0.5);
}

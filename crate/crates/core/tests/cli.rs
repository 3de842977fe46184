//! The `qndfb` binary end to end: exit codes, outputs, determinism.

use std::path::Path;
use std::process::Command;

fn qndfb() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qndfb"));
    c.env_remove("QNDFB_OUT_DIR");
    c
}

fn short_config(dir: &Path) -> std::path::PathBuf {
    let out = qndfb().args(["scenarios", "--out-dir"]).arg(dir).output().unwrap();
    assert!(out.status.success());
    let path = dir.join("spin-special-reduced.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg["n_trajectories"] = 6.into();
    cfg["horizon"] = 0.5.into();
    let short = dir.join("short.json");
    std::fs::write(&short, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    short
}

#[test]
fn usage_errors_exit_2() {
    let missing = qndfb().args(["simulate", "--config", "missing.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(qndfb().output().unwrap().status.code(), Some(2));
    assert_eq!(
        qndfb().args(["simulate", "--scenario", "qubit-openloop", "--bogus"]).output().unwrap().status.code(),
        Some(2)
    );
    assert_eq!(qndfb().args(["exponent", "nope.csv"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn check_qubit_reports_verdicts() {
    let out = qndfb().args(["check", "--model", "qubit"]).output().unwrap();
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let v = &doc["verdicts"];
    for key in ["H0", "H3", "condition_parameter", "parameter_g"] {
        assert_eq!(v[key], true, "{key}");
    }
    assert_eq!(v["H4 (user asserted)"], false);
}

#[test]
fn exponent_of_synthetic_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut s = String::from("trajectory_id,t,distance\n");
    for id in 0..40 {
        for i in 0..=200 {
            let t = i as f64 * 0.05;
            s += &format!("{id},{t},{}\n", (0.5 + 0.01 * id as f64) * (-3.0 * t).exp());
        }
    }
    std::fs::write(&path, s).unwrap();
    let out = qndfb().arg("exponent").arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((est["slope"].as_f64().unwrap() + 3.0).abs() < 1e-2);
}

#[test]
fn simulate_writes_outputs_and_honours_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let env_out = dir.path().join("from_env");
    let out =
        qndfb().env("QNDFB_OUT_DIR", &env_out).args(["simulate", "--dump", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_out.join("summary.json").exists());
    assert!(env_out.join("trajectories.csv").exists());

    let flag_out = dir.path().join("from_flag");
    let out = qndfb()
        .env("QNDFB_OUT_DIR", &env_out)
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&flag_out)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag_out.join("summary.json").exists());
}

#[test]
fn same_seed_same_bytes_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let mut files = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let out_dir = dir.path().join(tag);
        let out = qndfb()
            .args(["simulate", "--dump", "--seed", "99", "--threads", threads, "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success());
        files.push((
            std::fs::read(out_dir.join("summary.json")).unwrap(),
            std::fs::read(out_dir.join("trajectories.csv")).unwrap(),
        ));
    }
    assert!(files[0] == files[1]);
    assert!(files[0] == files[2]);
    let other = dir.path().join("d");
    qndfb()
        .args(["simulate", "--dump", "--seed", "100", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&other)
        .output()
        .unwrap();
    assert_ne!(std::fs::read(other.join("trajectories.csv")).unwrap(), files[0].1);
}

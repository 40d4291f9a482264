use std::process::Command;

fn pflow(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pflow")).args(args).output().unwrap()
}

#[test]
fn cutoff_norms_prints_one_row_per_eps() {
    let out = pflow(&["cutoff-norms", "--eps", "0.1,0.05", "--p", "4"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("eps,"));
    let ratio: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(ratio > 0.0);
}

#[test]
fn ns_reports_taylor_green_decay() {
    let out = pflow(&["ns", "--n", "32", "--nu", "0.1", "--t", "0.2"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rate = v["decay_rate"].as_f64().unwrap();
    assert!((rate - 0.2).abs() < 0.02 * 0.2, "{rate}");
    assert_eq!(v["ledger_violations"], 0);
}

#[test]
fn study_rejects_a_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"omega0": [], "shape": {"kind": "disk"}, "mu": 1.0,
            "sweep": {"nu": [0.001], "d_rule": {"rule": "fixed", "d": 0.5}, "T": 1.0},
            "grid": {"n": 64, "box": {"lo": [-1.0, -1.0], "length": 3.0}}}"#,
    )
    .unwrap();
    let out = pflow(&["study", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("omega0"));
}

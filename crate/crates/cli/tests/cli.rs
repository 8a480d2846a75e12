use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wtransport(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wtransport")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn transport_det_default_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("det");
    let o = wtransport(&["transport-det", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["schema"], 1);
    assert_eq!(s["pass"], true);
    assert!(s["metrics"]["norm_drift_rel"].as_f64().unwrap() <= 1e-6);
    assert!(s.get("wall_time").is_none());
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,norm,mean_g\n"));
    assert_eq!(csv.lines().count(), 1002);
    assert!(!csv.contains('\r'));
}

#[test]
fn stochastic_norm_drift_halves_with_dt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"dt": 1e-2, "t": 0.5, "paths": 8}"#);
    let drift = |dt: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = wtransport(&["transport-stoch", "--config", &cfg, "--dt", dt, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        summary(&out)["metrics"]["worst_norm_drift_rel"].as_f64().unwrap()
    };
    let ratio = drift("1e-2", "a") / drift("5e-3", "b");
    assert!(ratio >= 1.7, "ratio {ratio}");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"dt": 1e-2, "t": 0.2, "paths": 4, "n": 256}"#);
    for cmd in ["transport-stoch", "rs-check"] {
        let (a, b) = (tmp.path().join(format!("{cmd}-a")), tmp.path().join(format!("{cmd}-b")));
        for d in [&a, &b] {
            let o = wtransport(&[cmd, "--config", &cfg, "--seed", "5", "--out", d.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
        assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap(), "{cmd}");
    }
}

#[test]
fn config_hash_ignores_key_order() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.json", r#"{"seed": 3, "dt": 2e-3, "t": 0.2}"#);
    let b = write_config(tmp.path(), "b.json", r#"{"t": 0.2, "dt": 2e-3, "seed": 3}"#);
    let hash = |cfg: &str, name: &str| {
        let out = tmp.path().join(name);
        assert_eq!(code(&wtransport(&["flow", "--config", cfg, "--out", out.to_str().unwrap()])), 0);
        summary(&out)["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&a, "a"), hash(&b, "b"));
}

#[test]
fn configuration_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = wtransport(&["converge", "--q", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("5/2"));
    let bad = write_config(tmp.path(), "bad.json", "{\n  \"dt\": 1e-3,\n  \"colour\": 2\n}\n");
    let o = wtransport(&["flow", "--config", &bad]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":3:") && err.contains("colour"), "{err}");
    assert_eq!(code(&wtransport(&["flow", "--n", "100"])), 1);
    assert_eq!(code(&wtransport(&["nonsense"])), 1);
    assert_eq!(code(&wtransport(&["flow", "--config", "/nonexistent/c.json"])), 1);
    assert!(!out.exists());
}

#[test]
fn empty_config_file_means_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = write_config(tmp.path(), "e.json", "");
    let out = tmp.path().join("o");
    assert_eq!(code(&wtransport(&["flow", "--config", &empty, "--out", out.to_str().unwrap()])), 0);
    let s = summary(&out);
    assert_eq!(s["config"]["n"], 256);
    assert_eq!(s["config"]["dt"], 1e-3);
    assert_eq!(s["config"]["q"], 3.0);
    assert_eq!(s["config"]["seed"], 42);
}

#[test]
fn failed_checks_exit_three_and_still_write() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"dt": 1e-2, "t": 0.5, "paths": 4, "n": 64, "scheme": "strat-heun"}"#);
    let out = tmp.path().join("o");
    let o = wtransport(&["transport-stoch", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["pass"], false);
    assert_eq!(s["checks"]["kunita_agreement"], false);
}

#[test]
fn numerical_breakdown_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"dt": 1e-1, "t": 1.0, "n": 64, "potential": {"modes": [{"k": 3, "sin": 40.0}]}}"#,
    );
    let o = wtransport(&["flow", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn converge_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"n": 64, "dt": 1e-2, "t": 0.2, "levels": [2, 4], "ref_level": 8, "paths": 32}"#,
    );
    let out = tmp.path().join("o");
    let o = wtransport(&["converge", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    for key in ["levels", "sup_errors", "std_errors", "slope"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["sup_errors"].as_array().unwrap().len(), 2);
}

#[test]
fn ito_check_and_moments_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"n": 64, "dt": 1e-2, "t": 0.16, "paths": 64}"#);
    let out = tmp.path().join("ito");
    let o = wtransport(&["ito-check", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let reports = r.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for rep in reports {
        for key in ["functional", "estimate", "std_error", "z_score", "pass"] {
            assert!(rep.get(key).is_some(), "missing {key}");
        }
    }
    let out = tmp.path().join("mom");
    let o = wtransport(&["moments", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(summary(&out)["metrics"]["estimate"].as_f64().unwrap() > 1.0);
}

#[test]
fn reemission_overwrites_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    for seed in ["1", "2"] {
        let o = wtransport(&["rs-check", "--n", "256", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(summary(&out)["config"]["seed"], 2);
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["rs_gaps.csv", "summary.json"]);
}

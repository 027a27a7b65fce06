use std::path::Path;
use std::process::{Command, Output};

fn spider(args: &[&str], out: &Path, workers: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spider"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("SPIDER_WORKERS", workers)
        .output()
        .unwrap()
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    std::fs::read(dir.join(file)).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(dir, "manifest.json")).unwrap()
}

#[test]
fn simulate_writes_paths_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "simulate", "--preset", "brownian-spider", "--I", "3", "--alpha-mode", "l-dependent", "--paths", "200", "--seed", "7",
    ];
    let o = spider(&args, tmp.path(), "1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(read(tmp.path(), "paths.csv")).unwrap();
    assert!(csv.starts_with("path_id,t,x,branch,l\n0,0.0,0.0,1,0.0\n"));
    let m = manifest(tmp.path());
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["coefficients"]["branches"], 3);
    assert_eq!(m["artifacts"], serde_json::json!(["paths.csv", "summary.json", "manifest.json"]));
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn artifacts_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["simulate", "--preset", "reference", "--paths", "300", "--seed", "11"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(spider(&args, &a, "1").status.success());
    assert!(spider(&args, &b, "3").status.success());
    for f in ["paths.csv", "summary.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
}

#[test]
fn config_file_is_read_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"command": "skew", "paths": 50, "seed": 1, "skew": {"alpha": 0.7}}"#).unwrap();
    let out = tmp.path().join("o");
    let o = spider(&["skew", "--config", cfg.to_str().unwrap(), "--seed", "5"], &out, "1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!((m["seed"].as_u64(), m["config"]["paths"].as_u64()), (Some(5), Some(50)));
    assert_eq!(m["config"]["skew"]["alpha"], 0.7);
}

#[test]
fn malformed_config_exits_one_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"paths\": 10,\n  \"seeed\": 3\n}").unwrap();
    let o = spider(&["simulate", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"), "1");
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seeed") && err.contains("line 3"), "{err}");

    std::fs::write(&cfg, r#"{"command": "pde"}"#).unwrap();
    let o = spider(&["simulate", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"), "1");
    assert_eq!(o.status.code(), Some(1));

    let o = spider(&["simulate", "--I", "1"], &tmp.path().join("o"), "1");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("k.json");
    // No quadrature reaches this tolerance.
    let kernel = serde_json::json!({
        "tolerances": {"kernel": {
            "form": "local-time-weighted", "alpha_time": "last-zero",
            "inner_abs_tol": 1e-8, "inner_rel_tol": 1e-8, "entry_tol": 1e-300, "truncation": 10.0
        }}
    });
    std::fs::write(&cfg, kernel.to_string()).unwrap();
    let o = spider(&["kernel", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"), "1");
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failed_check_exits_three_and_keeps_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("v.json");
    let strict = r#"{"tolerances": {"min_r2": 1.5}, "verify": {"doublings": 0}}"#;
    std::fs::write(&cfg, strict).unwrap();
    let out = tmp.path().join("o");
    let o = spider(&["verify", "--config", cfg.to_str().unwrap(), "--paths", "300"], &out, "1");
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(manifest(&out)["verdict"], false);
    assert!(out.join("verify_report.json").exists());
}

#[test]
fn compare_fk_reports_the_exact_linear_case() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "compare-fk", "--preset", "brownian-spider", "--terminal", "x-minus-l", "--paths", "2000", "--x0", "0.5",
    ];
    let o = spider(&args, tmp.path(), "1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "fk_report.json")).unwrap();
    // E[x_T - l_T] = x_0 - l_0 for any spinning measure.
    assert!((r["pde"].as_f64().unwrap() - 0.5).abs() < 1e-10);
    assert_eq!(r["pass"], true);
}

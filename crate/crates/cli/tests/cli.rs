use std::path::Path;
use std::process::{Command, Output};

fn logderiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logderiv")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_in(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let mut args = vec!["run", config, "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    logderiv(&args)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gaussian_builtin_passes_with_tight_summary_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), "gaussian-eq1", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(tmp.path().join("summary.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["scenario", "check", "analytic", "oracle", "abs_err", "rel_err", "tol", "pass"]
    );
    let mut eq1 = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if rec[1].starts_with("eq1/") {
            eq1 += 1;
            let rel: f64 = rec[5].parse().unwrap();
            assert!(rel <= 1e-6, "{rec:?}");
        }
        // pass is derivable from the recorded numbers
        let rel: f64 = rec[5].parse().unwrap();
        let tol: f64 = rec[6].parse().unwrap();
        assert_eq!(&rec[7] == "true", rel <= tol);
    }
    assert!(eq1 > 0);
}

#[test]
fn desk_builtin_writes_anomaly_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), "anomaly-desk-xy", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curve = std::fs::read_to_string(tmp.path().join("curves/anomaly-desk-xy__anomaly-field.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("x1,anomaly"));
    // S = x y with generator (x^2, -x y): the anomaly is x
    for line in lines {
        let (x, a) = line.split_once(',').unwrap();
        let (x, a): (f64, f64) = (x.parse().unwrap(), a.parse().unwrap());
        assert!((x - a).abs() < 1e-12, "{line}");
    }
}

#[test]
fn check_failure_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), "theorem1-translation", &[]);
    assert_eq!(code(&o), 1);
    assert!(tmp.path().join("report.json").exists());
}

#[test]
fn mismatched_dimensions_exit_two_with_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.toml",
        r#"
[[scenario]]
name = "bad"
kind = "theorem1_check"
measure = { builtin = "gaussian", mean = [0.0, 0.0] }
family = { builtin = "field-shift-family", n = 1, m = 1 }
lagrangian = { builtin = "field-square" }
configuration = { builtin = "constant", value = [0.0, 0.0, 0.0] }
delta = [1.0, 2.0]
"#,
    );
    let o = run_in(&tmp.path().join("out"), &cfg, &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("family base"), "{err}");
    assert!(err.contains("delta"), "{err}");
    assert!(!tmp.path().join("out/report.json").exists());
}

#[test]
fn parse_errors_exit_two_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "typo.toml", "name = \"x\"\nkind = \"logderiv_check\"\nmesure = 1\n");
    let o = run_in(tmp.path(), &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = run_in(tmp.path(), "no-such-scenario", &[]);
    assert_eq!(code(&o), 2);

    let o = run_in(tmp.path(), "gaussian-eq1", &["--variant", "sideways"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn numeric_fault_exits_three_with_probe_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "fault.toml",
        r#"
name = "fault"
kind = "logderiv_check"
measure = { builtin = "gaussian", mean = [0.0] }
field = { builtin = "constant-field", value = [1.0] }
test_functions = [ { family = "polynomial-times-gaussian", terms = [{ coefficient = 1e308, powers = [40] }], center = [0.0], width = 1e3 } ]
"#,
    );
    let o = run_in(tmp.path(), &cfg, &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("probe point"), "{}", stderr(&o));
}

#[test]
fn batch_config_runs_concurrently_and_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "batch.toml",
        r#"
[[scenario]]
name = "mc-gauss"
kind = "logderiv_check"
measure = { builtin = "gaussian", mean = [0.1, -0.2] }
field = { builtin = "rotation-field" }
engine = { mode = "monte_carlo", samples = 20000, workers = 3 }
tolerance = 1.0

[[scenario]]
name = "quartic"
kind = "logderiv_check"
measure = { builtin = "quartic-well", dim = 1 }
field = { builtin = "nonlinear-field", dim = 1, scale = 0.5 }
engine = { mode = "gauss_hermite_quadrature", order = 80 }
"#,
    );
    let strip = |p: &Path| {
        let t = std::fs::read_to_string(p.join("report.json")).unwrap();
        t[..t.find("\"timestamp\"").unwrap()].to_string()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_eq!(code(&run_in(&a, &cfg, &["--seed", "5", "--jobs", "2"])), 0);
    assert_eq!(code(&run_in(&b, &cfg, &["--seed", "5", "--jobs", "1"])), 0);
    assert_eq!(code(&run_in(&c, &cfg, &["--seed", "6", "--jobs", "2"])), 0);
    assert_eq!(strip(&a), strip(&b));
    assert_ne!(strip(&a), strip(&c));

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let scenarios = report["scenarios"].as_array().unwrap();
    assert_eq!(scenarios.len(), 2);
    assert_eq!(scenarios[0]["engine"]["seed"], 5);
    assert_eq!(scenarios[0]["engine"]["order_or_samples"], 20000);
    assert!(report["timestamp"]["total_ms"].is_number());
}

#[test]
fn list_builtins_catalog_and_filter() {
    let o = logderiv(&["list-builtins"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["gaussian", "flat-box", "rotation-family", "translation-family", "scaling-family", "xy-desk-action"] {
        assert!(text.lines().any(|l| l.split_whitespace().nth(1) == Some(name)), "{name} missing");
    }

    let o = logderiv(&["list-builtins", "--kind", "family"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let kinds: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().next()).filter(|k| *k != "params:").collect();
    assert!(!kinds.is_empty());
    assert!(kinds.iter().all(|k| *k == "family"), "{kinds:?}");

    let o = logderiv(&["list-builtins", "--kind", "spaceship"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn variant_flag_is_echoed_and_restricts_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), "theorem1-field-shift", &["--variant", "paper"]);
    // the paper-literal variant carries an extra score term here
    assert_eq!(code(&o), 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let s = &report["scenarios"][0];
    assert_eq!(s["scenario"]["variant"], "paper");
    let checks = s["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["check"].as_str().unwrap().starts_with("theorem1/paper_literal/")));

    let o = run_in(tmp.path(), "theorem1-field-shift", &["--variant", "corrected"]);
    assert_eq!(code(&o), 0);
}

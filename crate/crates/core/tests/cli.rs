use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn erot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erot"))
        .args(args)
        .env_remove("EROT_LAMBDA")
        .output()
        .expect("spawn erot")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_happy_path_writes_solution_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sol.json");
    let r = fixture("measures/small_r.csv");
    let c = fixture("costs/abs_diff.json");
    let o = erot(&["solve", "--r", s(&r), "--s", s(&fixture("measures/small_s.csv")), "--cost", s(&c), "--lambda", "1.0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sol = json(&out);
    assert!(sol["marginal_residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(sol["plan"].as_array().unwrap().len(), 3);
    let manifest = json(&dir.path().join("sol.json.manifest.json"));
    assert_eq!(manifest["subcommand"], "solve");
    assert_eq!(manifest["seed"], Value::Null);
    assert_eq!(manifest["input_digests"].as_array().unwrap().len(), 3);
}

#[test]
fn missing_lambda_is_config_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture("measures/small_r.csv");
    let o = erot(&["solve", "--r", s(&r), "--s", s(&r), "--cost", s(&fixture("costs/abs_diff.json")), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "ConfigParse");
}

#[test]
fn unknown_subcommand_and_validation_errors() {
    let o = erot(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "UnknownSubcommand");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"weights": [0.5, -0.1, 0.6]}"#).unwrap();
    let o = erot(&["solve", "--r", s(&bad), "--s", s(&bad), "--cost", s(&fixture("costs/discrete.json")), "--lambda", "1", "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "NegativeWeight");
}

#[test]
fn non_convergence_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture("measures/small_r.csv");
    let sm = fixture("measures/small_s.csv");
    let o = erot(&["solve", "--r", s(&r), "--s", s(&sm), "--cost", s(&fixture("costs/abs_diff.json")), "--lambda", "1", "--max-iter", "1", "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "NonConvergence");
}

#[test]
fn check_conditions_unbounded_plan_fails_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cond.json");
    let g = fixture("measures/geometric_q05.json");
    let o = erot(&["check-conditions", "--theorem", "plan", "--r", s(&g), "--s", s(&g), "--cost", s(&fixture("costs/unbounded_p2.json")), "--lambda", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out)["verdict"], "Fail");
}

#[test]
fn env_var_supplies_flag_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture("measures/small_r.csv");
    let c = fixture("costs/abs_diff.json");
    let a = dir.path().join("a.json");
    let o = Command::new(env!("CARGO_BIN_EXE_erot"))
        .args(["solve", "--r", s(&r), "--s", s(&r), "--cost", s(&c), "--out", s(&a)])
        .env("EROT_LAMBDA", "0.5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&a)["lambda"], 0.5);
    let b = dir.path().join("b.json");
    let o = Command::new(env!("CARGO_BIN_EXE_erot"))
        .args(["solve", "--r", s(&r), "--s", s(&r), "--cost", s(&c), "--lambda", "2", "--out", s(&b)])
        .env("EROT_LAMBDA", "0.5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&b)["lambda"], 2.0);
}

#[test]
fn deterministic_subcommands_run() {
    let dir = tempfile::tempdir().unwrap();
    let r = fixture("measures/small_r.csv");
    let sm = fixture("measures/small_s.csv");
    let c = fixture("costs/abs_diff.json");
    for (cmd, extra) in [
        ("divergence", vec!["--lambda", "1"]),
        ("bounds", vec!["--lambda", "1"]),
        ("variance", vec!["--lambda", "1", "--delta", "0.5"]),
        ("plan-cov", vec!["--lambda", "1"]),
        ("derivative-check", vec!["--lambda", "1"]),
        ("ot-exact", vec!["--lambdas", "1,0.5,0.1"]),
    ] {
        let out = dir.path().join(format!("{cmd}.json"));
        let mut args = vec![cmd, "--r", s(&r), "--s", s(&sm), "--cost", s(&c), "--out", s(&out)];
        args.extend(extra);
        let o = erot(&args);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(format!("{cmd}.json.manifest.json")).exists());
    }
    assert_eq!(json(&dir.path().join("bounds.json"))["holds"], true);
    assert_eq!(json(&dir.path().join("derivative-check.json"))["pass"], true);
    assert_eq!(json(&dir.path().join("ot-exact.json"))["gap"]["all_hold"], true);
}

#[test]
fn mc_clt_replay_is_byte_identical_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"r": {"family": "geometric", "q": 0.7, "size": 8, "finite": true},
            "s": {"family": "uniform", "size": 8},
            "cost": {"family": "bounded", "base": {"kind": "metric_power", "p": 1.0}},
            "lambda": 1.0, "n": 100, "replications": 40,
            "statistic": {"kind": "value_clt"}, "seed": 3}"#,
    )
    .unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = erot(&["mc-clt", "--config", s(&cfg), "--out", s(&out), "--threads", threads]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read(&out).unwrap(),
            std::fs::read(dir.path().join(format!("{name}.draws.csv"))).unwrap(),
            std::fs::read(dir.path().join(format!("{name}.qq.csv"))).unwrap(),
        )
    };
    let a = run("a.json", "1");
    let b = run("b.json", "4");
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a.0).unwrap();
    assert!(report.get("runtime_seconds").is_none());
    assert_eq!(report["standardized_draws"].as_array().unwrap().len(), 40);
    let m = json(&dir.path().join("a.json.manifest.json"));
    assert_eq!(m["seed"], 3);
}

#[test]
fn bootstrap_and_vanishing_lambda_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"r": {"family": "explicit", "weights": [0.13, 0.29, 0.58]},
            "s": {"family": "explicit", "weights": [0.21, 0.34, 0.45]},
            "cost": {"family": "bounded", "base": {"kind": "metric_power", "p": 1.0}},
            "lambda_schedule": {"scale": 1.0}, "n": 200, "replications": 20,
            "statistic": {"kind": "value_clt"}, "seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("boot.json");
    let o = erot(&["bootstrap", "--config", s(&cfg), "--out", s(&out), "--seed", "9", "--timing"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&out);
    assert_eq!(rep["statistic"], "bootstrap");
    assert!(rep["runtime_seconds"].as_f64().is_some());
    let out = dir.path().join("van.json");
    let o = erot(&["vanishing-lambda", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out)["variance_trace"].as_array().unwrap().len(), 1);
}

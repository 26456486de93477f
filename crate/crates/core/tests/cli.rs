//! End-to-end runs of the `entsum` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const GMM: &str = r#"{"model":"mixture","C":3,"pi":[0.3,0.45,0.25],
  "components":[[-3.0,0.0,0.6,1.0],[0.0,3.0,1.2,0.4],[3.0,-1.0,0.5,0.8]],
  "component_family":"gaussian-diagonal"}"#;

fn entsum(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entsum")).current_dir(dir).args(args).output().expect("entsum runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gen_gmm(dir: &Path, n: &str) {
    let out = entsum(dir, &["gen", "--model", GMM, "--n", n, "--seed", "3", "--out", "data.jsonl"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_succeeds_and_embeds_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_gmm(d, "300");
    let out = entsum(d, &["verify", "--model", GMM, "--data", "data.jsonl", "--seed", "9", "--out", "v.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&d.join("v.json"));
    assert_eq!(v["kind"], "verdict");
    assert_eq!(v["seed"], 9);
    assert_eq!(v["config"]["seed"], 9);
    assert_eq!(v["config"]["command"], "verify");
    assert_eq!(v["config"]["data_path"], "data.jsonl");
    assert_eq!(v["verdict"]["pass"], true);
    assert!(v["config"].get("output_path").is_none());
}

#[test]
fn truncated_fit_fails_verification_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_gmm(d, "300");
    let args = ["verify", "--model", GMM, "--data", "data.jsonl", "--max-iters", "2", "--plain-em", "--out", "v.json"];
    let out = entsum(d, &args);
    assert_eq!(code(&out), 1);
    let v = read_json(&d.join("v.json"));
    assert_eq!(v["verdict"]["pass"], false);
    assert_eq!(v["verdict"]["converged"], false);
    assert!(v["verdict"]["reason"].as_str().unwrap().contains("non-stationary"));

    let out = entsum(d, &["report", "v.json", "--out", "r.txt", "--csv", "r.csv"]);
    assert_eq!(code(&out), 1);
    let text = std::fs::read_to_string(d.join("r.txt")).unwrap();
    assert!(text.contains("FAIL"));
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert!(csv.starts_with("source,name,metric,value,pass\n"));
    assert!(csv.contains(",false\n"));
}

#[test]
fn missing_data_is_an_io_error_with_no_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = entsum(d, &["verify", "--model", GMM, "--data", "absent.jsonl", "--out", "v.json"]);
    assert_eq!(code(&out), 3);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let leftovers: Vec<_> = std::fs::read_dir(d).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn bad_configuration_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&entsum(d, &["fit", "--bogus-flag"])), 2);
    assert_eq!(code(&entsum(d, &["gen", "--model", "{not json", "--n", "5", "--out", "x"])), 2);
    assert_eq!(code(&entsum(d, &["gen", "--model", GMM, "--n", "5", "--out", "x", "--tol-eq", "-1"])), 2);
    std::fs::write(d.join("cfg.json"), r#"{"seed": 1, "unknown_key": 2}"#).unwrap();
    assert_eq!(code(&entsum(d, &["gen", "--config", "cfg.json", "--model", GMM, "--n", "5", "--out", "x"])), 2);
    assert!(!d.join("x").exists());
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_gmm(d, "200");
    let cfg = serde_json::json!({"seed": 4, "max_iters": 77, "tol_eq": 1e-5, "data": "data.jsonl"});
    std::fs::write(d.join("cfg.json"), cfg.to_string()).unwrap();
    let out = entsum(d, &["fit", "--config", "cfg.json", "--model", GMM, "--seed", "8", "--out", "f.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let f = read_json(&d.join("f.json"));
    assert_eq!(f["kind"], "fit");
    assert_eq!(f["config"]["seed"], 8);
    assert_eq!(f["config"]["max_iters"], 77);
    assert_eq!(f["config"]["tolerances"]["tol_eq"], 1e-5);
    assert_eq!(f["config"]["tolerances"]["tol_grad"], 1e-8);
    assert_eq!(f["config"]["draws"], 50);
}

#[test]
fn gen_is_reproducible_and_carries_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.jsonl", "b.jsonl"] {
        assert_eq!(code(&entsum(d, &["gen", "--model", "poisson-mixture", "--n", "20", "--seed", "2", "--out", name])), 0);
    }
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn criterion_for_a_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = entsum(d, &["criterion", "--model", "sbn", "--draws", "5", "--seed", "1", "--out", "c.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let c = read_json(&d.join("c.json"));
    assert_eq!(c["kind"], "certification");
    assert_eq!(c["pass"], true);
    assert_eq!(c["reports"].as_array().unwrap().len(), 1);
    assert_eq!(c["reports"][0]["certificates"].as_array().unwrap().len(), 5);
    assert_eq!(c["counterexamples"]["both_fail"], true);
}

#[test]
fn ppca_closed_form_and_trajectory_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&entsum(d, &["gen", "--model", "ppca-standard", "--n", "50", "--out", "data.jsonl"])), 0);
    let out = entsum(d, &["verify", "--model", "ppca-standard", "--data", "data.jsonl", "--method", "closed-form", "--out", "v.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = entsum(d, &["fit", "--model", "gaussian-mixture", "--data", "data.jsonl", "--out", "f.json", "--trajectory-csv", "t.csv"]);
    // dimension mismatch between a 2-D mixture and 5-D data
    assert_eq!(code(&out), 2);
    assert!(!d.join("t.csv").exists());

    gen_gmm(d, "100");
    let out = entsum(d, &["fit", "--model", GMM, "--data", "data.jsonl", "--out", "f.json", "--trajectory-csv", "t.csv"]);
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(csv.starts_with("iteration,elbo,pseudo_elbo,entropy_sum\n"));
}

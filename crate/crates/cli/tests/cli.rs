use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_growthopt"))
        .arg("--config")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn write_config(dir: &Path, model: &str, extra: &str) -> PathBuf {
    std::fs::write(dir.join("model.json"), model).unwrap();
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, format!(r#"{{"model": "model.json", "grid": {{"simplex_order": 4}}, "output_dir": "out"{extra}}}"#)).unwrap();
    cfg
}

#[test]
fn validate_bundled_model() {
    let out = scratch("validate");
    let o = run(&data("config.json"), &out, &["validate"]);
    assert_eq!(o.status.code(), Some(0));
    let r = json(&o.stdout);
    assert_eq!(r["a3"], "pass");
    assert_eq!(r["a6"], "pass");
    assert!(r["kappa"].as_f64().unwrap() < 1.0);
    assert!(r["p_hat"].as_f64().unwrap() > r["eta"].as_f64().unwrap());
    assert!(out.join("validate.manifest.json").exists());
}

#[test]
fn identity_transition_fails_ergodicity() {
    let dir = scratch("identity");
    let cfg = write_config(
        &dir,
        r#"{"assets": 2, "factors": {"transition": [[1, 0], [0, 1]]}, "shocks": {"probs": [1]},
            "returns": [[[1.1, 1.0]], [[1.0, 1.1]]], "costs": {"buy": 0.002, "sell": 0.002, "fixed": 0.5}}"#,
        "",
    );
    let o = run(&cfg, &dir.join("out"), &["validate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o.stdout)["a3"], "fail");
}

#[test]
fn heavy_costs_fail_the_drag_gate() {
    let dir = scratch("drag");
    let model = std::fs::read_to_string(data("model.json")).unwrap();
    let cfg = write_config(&dir, &model, r#", "costs": {"buy": 0.4, "sell": 0.4}"#);
    let o = run(&cfg, &dir.join("out"), &["validate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o.stdout)["a6"], "fail");
    // Solving refuses to start on a failed gate.
    let o = run(&cfg, &dir.join("out"), &["solve", "--beta", "0.9"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json(&o.stderr)["error"]["kind"], "domain");
}

#[test]
fn empty_config_is_a_usage_error() {
    let dir = scratch("empty");
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, "").unwrap();
    let o = run(&cfg, &dir, &["validate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&o.stderr)["error"]["kind"], "usage");
    std::fs::write(&cfg, "{}").unwrap();
    assert_eq!(run(&cfg, &dir, &["validate"]).status.code(), Some(2));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_growthopt")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_writes_a_reloadable_solution() {
    let out = scratch("solve");
    let o = run(&data("config.json"), &out, &["--simplex-order", "6", "solve", "--beta", "0.95"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&o.stdout);
    let file = out.join(r["solution_file"].as_str().unwrap());
    let (h, values, policy) = growthopt::io::parse_solution_csv(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(h.beta, 0.95);
    assert_eq!(values.len(), policy.impulse.len());
    let m = json(&std::fs::read(out.join("solve.manifest.json")).unwrap());
    let listed = &m["artifacts"][0];
    let bytes = std::fs::read(&file).unwrap();
    assert_eq!(listed["sha256"].as_str().unwrap(), growthopt::io::sha256_hex(&bytes));
}

#[test]
fn manifests_match_apart_from_wall_time() {
    let mut manifests = Vec::new();
    for name in ["man_a", "man_b"] {
        let out = scratch(name);
        let o = run(&data("config.json"), &out, &["--simplex-order", "6", "--betas", "0.9,0.99", "optimal"]);
        assert_eq!(o.status.code(), Some(0));
        let mut m = json(&std::fs::read(out.join("optimal.manifest.json")).unwrap());
        m.as_object_mut().unwrap().remove("wall_time_s");
        manifests.push(m);
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn simulate_rejects_a_policy_for_another_model() {
    let dir = scratch("foreign");
    let o = run(&data("config.json"), &dir, &["--simplex-order", "4", "--betas", "0.9", "optimal"]);
    assert_eq!(o.status.code(), Some(0));
    let other = r#"{"assets": 2, "factors": {"transition": [[0.5, 0.5], [0.5, 0.5]]}, "shocks": {"probs": [1]},
        "returns": [[[1.1, 1.05]], [[1.05, 1.1]]], "costs": {"buy": 0.002, "sell": 0.002, "fixed": 0.5}}"#;
    let cfg = write_config(&dir, other, "");
    let policy = dir.join("policy.csv").display().to_string();
    let o = run(&cfg, &dir.join("out"), &["simulate", "--policy", &policy]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ldcheck_and_verify_succeed_on_bundled_model() {
    let out = scratch("ld");
    let o = run(&data("config.json"), &out, &["ldcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("ld_tail.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with("T,p_hat,eps,tail_prob,n_paths"));
    let o = run(&data("config.json"), &out, &["--simplex-order", "6", "verify", "--samples", "2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(json(&o.stdout)["passed"], true);
}

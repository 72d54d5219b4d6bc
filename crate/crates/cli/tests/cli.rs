use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use diffrobust_cli::parse_and_dispatch;
use serde_json::{json, Value};

fn base_config() -> Value {
    json!({
        "criterion": "discounted",
        "dim": 1,
        "drift": {"kind": "ou", "theta": 1.0},
        "diffusion": {"kind": "constant", "scale": std::f64::consts::SQRT_2},
        "cost": {"kind": "capped_quadratic", "state_weight": 1.0, "control_weight": 0.1, "cap": 4.0},
        "family": {"kind": "cost_regularized", "params": {"eps0": 1.0}},
        "grid": {"lower": [-4.0], "upper": [4.0], "shape": [81]},
        "actions": [[-1.0], [0.0], [1.0]],
        "n_values": [1, 4, 16],
        "probes": [[0.0], [1.0]]
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> i32 {
    parse_and_dispatch(args.iter().map(|s| s.to_string()))
}

fn manifest_files(out: &Path) -> Vec<String> {
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    m["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap().to_string()).collect()
}

#[test]
fn validate_ok() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ou1d.json", &base_config());
    assert_eq!(run(&["validate", "--config", cfg.to_str().unwrap()]), 0);
}

#[test]
fn zero_perturbation_override_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.json", &base_config());
    let out = dir.path().join("out");
    let code = run(&[
        "robustness",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--override",
        "family.params.eps0=0",
    ]);
    assert_eq!(code, 0);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let cont: f64 = cols[5].parse().unwrap();
        let rob: f64 = cols[6].parse().unwrap();
        assert!(cont <= 1e-9 && rob.abs() <= 1e-9, "{line}");
    }
    let files = manifest_files(&out);
    for f in ["table.csv", "meta.json", "plot.dat"] {
        assert!(files.iter().any(|x| x == f));
    }
}

#[test]
fn inverted_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["grid"]["lower"] = json!([4.0]);
    v["grid"]["upper"] = json!([-4.0]);
    let cfg = write(dir.path(), "bad.json", &v);
    assert_eq!(run(&["solve", "--config", cfg.to_str().unwrap()]), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["solve", "--bogus"]), 2);
    assert_eq!(run(&["solve"]), 2);
    assert_eq!(run(&["solve", "--config", "/nonexistent/cfg.json"]), 2);
}

#[test]
fn unknown_override_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &base_config());
    assert_eq!(run(&["validate", "--config", cfg.to_str().unwrap(), "--override", "alpha=0"]), 2);
    assert_eq!(run(&["validate", "--config", cfg.to_str().unwrap(), "--override", "nope=1"]), 2);
}

#[test]
fn failing_thresholds_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["thresholds"] = json!({"continuity": 1e-12});
    let cfg = write(dir.path(), "c.json", &v);
    let out = dir.path().join("out");
    assert_eq!(run(&["robustness", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
    assert!(out.join("table.csv").exists());
}

#[test]
fn solve_writes_field_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &base_config());
    let out = dir.path().join("solve");
    assert_eq!(run(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let side: Value = serde_json::from_str(&fs::read_to_string(out.join("solution.json")).unwrap()).unwrap();
    assert_eq!(side["tie_break"], "lowest-index");
    assert_eq!(side["alpha"], 1.0);
    assert_eq!(side["policy"].as_array().unwrap().len(), 81);
    let field = diffrobust::ValueField::read_binary(fs::File::open(out.join("value.bin")).unwrap()).unwrap();
    assert_eq!(field.values().len(), 81);
    let csv = fs::read_to_string(out.join("value.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('x')).count(), 81);
    assert!(manifest_files(&out).contains(&"value.bin".to_string()));
}

#[test]
fn finite_horizon_writes_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["criterion"] = json!("finite_horizon");
    v["horizon"] = json!(0.5);
    v["time_steps"] = json!(10);
    let cfg = write(dir.path(), "c.json", &v);
    let out = dir.path().join("fh");
    assert_eq!(run(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("steps.json")).unwrap()).unwrap();
    assert_eq!(m["N_t"], 10);
    assert_eq!(m["files"].as_array().unwrap().len(), 11);
    assert_eq!(m["policy"].as_array().unwrap().len(), 10);
    assert!((m["dt"].as_f64().unwrap() - 0.05).abs() < 1e-15);
}

#[test]
fn evaluate_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = base_config();
    v["mc"] = json!({"dt": 0.01, "horizon": 10.0, "n_paths": 64});
    v["evaluate"] = json!({"n": 4});
    let cfg = write(dir.path(), "c.json", &v);
    let out = dir.path().join("ev");
    assert_eq!(run(&["evaluate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let ev: Value = serde_json::from_str(&fs::read_to_string(out.join("evaluate.json")).unwrap()).unwrap();
    assert_eq!(ev["policy_source"]["n"], 4);

    let sim = dir.path().join("sim");
    let args = ["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap(), "--dump-paths"];
    assert_eq!(run(&args), 0);
    let est: Value = serde_json::from_str(&fs::read_to_string(sim.join("estimates.json")).unwrap()).unwrap();
    let e = &est["probes"][0]["estimate"];
    for k in ["mean", "std_error", "n_paths", "seed", "tail_bound", "clamp_events"] {
        assert!(!e[k].is_null(), "{k}");
    }
    let dump = fs::read_to_string(sim.join("paths_probe0.csv")).unwrap();
    assert_eq!(dump.lines().count(), 65);

    // same seed, same numbers
    let sim2 = dir.path().join("sim2");
    let args = ["simulate", "--config", cfg.to_str().unwrap(), "--out", sim2.to_str().unwrap()];
    assert_eq!(run(&args), 0);
    let est2: Value = serde_json::from_str(&fs::read_to_string(sim2.join("estimates.json")).unwrap()).unwrap();
    assert_eq!(est["probes"], est2["probes"]);
}

#[test]
fn binary_honours_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &base_config());
    let status = Command::new(env!("CARGO_BIN_EXE_diffrobust"))
        .args(["validate", "--config", cfg.to_str().unwrap()])
        .env("DIFFROBUST_THREADS", "2")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = Command::new(env!("CARGO_BIN_EXE_diffrobust"))
        .args(["validate", "--config", cfg.to_str().unwrap()])
        .env("DIFFROBUST_THREADS", "zero")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

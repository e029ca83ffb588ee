use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
    "dataset": {"kind": "two_moons", "n_per_domain": 80, "noise_std": 0.1, "rotation_deg": 30},
    "model": {"hidden": [8, 8], "groups": 2, "discriminator_hidden": 8},
    "variant": {"kind": "dann", "lambda": 1.0},
    "optimizer": {"lr": 0.05, "meta_lr": 0.5},
    "strategy": {"kind": "metaalign", "roles": "alternate"},
    "iterations": 40,
    "batch_size": 16,
    "eval_every": 10,
    "seed": 2
}"#;

fn metaalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaalign"))
        .args(args)
        .env_remove("METAALIGN_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn json_stderr(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_outputs_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let out_dir = dir.path().join("out");
    let out = metaalign(&["run", s(&cfg), "--output-dir", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json_stdout(&out);
    assert_eq!(summary["steps"], 40);
    assert_eq!(summary["aborted"], false);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    for file in ["metrics.jsonl", "summary.json", "checkpoint.json"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 40);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["iteration", "losses", "grad_dot_total", "grad_cos", "grad_dot_per_group", "beta", "source_acc", "target_acc", "wallclock_ms"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(first["losses"].as_object().unwrap().len(), 5);
}

#[test]
fn same_config_gives_identical_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(metaalign(&["run", s(&cfg), "--output-dir", s(&a)]).status.success());
    assert!(metaalign(&["run", s(&cfg), "--output-dir", s(&b)]).status.success());
    for file in ["metrics.jsonl", "checkpoint.json", "summary.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn zero_alpha_matches_joint_training() {
    let dir = tempfile::tempdir().unwrap();
    let meta = SMALL
        .replace("\"meta_lr\": 0.5", "\"meta_lr\": 0.0")
        .replace("\"roles\": \"alternate\"", "\"roles\": \"alternate\", \"allow_zero_alpha\": true");
    let joint = SMALL.replace("{\"kind\": \"metaalign\", \"roles\": \"alternate\"}", "{\"kind\": \"joint\"}");
    assert_ne!(joint, SMALL);
    let (m, j) = (dir.path().join("m"), dir.path().join("j"));
    let mc = write_config(dir.path(), "meta.json", &meta);
    let jc = write_config(dir.path(), "joint.json", &joint);
    assert!(metaalign(&["run", s(&mc), "--output-dir", s(&m)]).status.success());
    assert!(metaalign(&["run", s(&jc), "--output-dir", s(&j)]).status.success());

    let params = |d: &Path| -> Vec<(String, Vec<f64>)> {
        let ckpt: Value = serde_json::from_slice(&std::fs::read(d.join("checkpoint.json")).unwrap()).unwrap();
        ckpt["params"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|p| !p["name"].as_str().unwrap().starts_with("beta"))
            .map(|p| {
                let v = p["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
                (p["name"].as_str().unwrap().to_string(), v)
            })
            .collect()
    };
    let (pm, pj) = (params(&m), params(&j));
    assert_eq!(pm.len(), pj.len());
    for ((na, va), (nb, vb)) in pm.iter().zip(&pj) {
        assert_eq!(na, nb);
        for (x, y) in va.iter().zip(vb) {
            assert!((x - y).abs() <= 1e-12, "{na}: {x} vs {y}");
        }
    }
    let losses = |d: &Path| -> Vec<f64> {
        std::fs::read_to_string(d.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["losses"]["L_cls"].as_f64().unwrap())
            .collect()
    };
    for (x, y) in losses(&m).iter().zip(losses(&j)) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn sweep_aggregates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let out_dir = dir.path().join("sweep");
    let out = metaalign(&["sweep", s(&cfg), "--seeds", "1,2,3", "--output-dir", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let agg = json_stdout(&out);
    assert_eq!(agg["completed"], 3);
    assert_eq!(agg["final_target_acc"]["n"], 3);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(out_dir.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(on_disk, agg);
    for seed in 1..=3 {
        assert!(out_dir.join(format!("seed-{seed}")).join("summary.json").exists());
    }
}

#[test]
fn eval_reproduces_final_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let out_dir = dir.path().join("out");
    assert!(metaalign(&["run", s(&cfg), "--output-dir", s(&out_dir)]).status.success());
    let out = metaalign(&["eval", s(&out_dir.join("checkpoint.json")), s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = json_stdout(&out);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let last: Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(eval["target_acc"], last["target_acc"]);
    assert_eq!(eval["source_acc"], last["source_acc"]);
}

#[test]
fn missing_checkpoint_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    let missing = dir.path().join("nope.json");
    let out = metaalign(&["eval", s(&missing), s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = json_stderr(&out);
    assert_eq!(err["error"], "checkpoint");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &SMALL.replace("\"seed\": 2", "\"seed\": 2, \"itrations\": 3"));
    let out = metaalign(&["run", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(json_stderr(&out)["message"].as_str().unwrap().contains("itrations"));
}

#[test]
fn divergence_exits_with_abort_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &SMALL.replace("\"lr\": 0.05", "\"lr\": 1e300"));
    let out_dir = dir.path().join("out");
    let out = metaalign(&["run", s(&cfg), "--output-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json_stdout(&out)["aborted"], true);
    assert!(out_dir.join("abort.json").exists());
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let out = metaalign(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("meta:alignment_role"));

    let out = metaalign(&["gradcheck", "--json", "--corrupt", "loss:mmd"]);
    assert_eq!(out.status.code(), Some(4));
    let failed = json_stderr(&out)["failed"].clone();
    assert_eq!(failed, serde_json::json!(["loss:mmd"]));
}

#[test]
fn environment_overrides_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let cfg = write_config(
        dir.path(),
        "cfg.json",
        &SMALL.replace("\"seed\": 2", &format!("\"seed\": 2, \"output_dir\": {:?}", s(&dir.path().join("from-config")))),
    );
    let out = Command::new(env!("CARGO_BIN_EXE_metaalign"))
        .args(["run", s(&cfg)])
        .env("METAALIGN_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("summary.json").exists());
    assert!(!dir.path().join("from-config").exists());
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "dfn": { "power_law": { "alpha": 2.5, "r_min": 2.0, "r_max": 20.0 }, "density": 3.0 },
  "srf": { "grid": 32 },
  "solver": { "resolution": 12 },
  "blocks": { "domain": 20.0, "block": 10.0, "coarse": 16 },
  "raster": { "size": 16 },
  "dataset": { "n_samples": 40 },
  "train": { "epochs": 2, "batch_size": 8, "lr": 0.01, "channels": [2, 3], "dense": [8] }
}"#;

fn dfmup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfmup")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = dfmup(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("stderr has a line")).expect("error is JSON")
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("c.json");
    std::fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn homogenize_is_deterministic_and_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let outs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for o in &outs {
        run_ok(&["homogenize", "--config", &cfg, "--seed", "7", "--out", o.to_str().unwrap()]);
    }
    let a = std::fs::read(outs[0].join("blocks.csv")).unwrap();
    assert_eq!(a, std::fs::read(outs[1].join("blocks.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 1 + 25);

    let resolved = read_json(&outs[0].join("config.resolved.json"));
    assert_eq!(resolved["seeds"]["master"], 7);
    assert_eq!(resolved["train"]["patience"], 10);
    let side = read_json(&outs[0].join("homogenize.json"));
    assert_eq!(side["master_seed"], 7);
    assert_eq!(side["config_hash"].as_str().unwrap().len(), 64);

    let log = std::fs::read_to_string(outs[0].join("run.log")).unwrap();
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["level"].is_string());
    }
    assert!(log.contains("stage_seeds"));
}

#[test]
fn different_seed_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for (seed, name) in [("1", "a"), ("2", "b")] {
        run_ok(&["generate-dfn", "--config", &cfg, "--seed", seed, "--out", dir.path().join(name).to_str().unwrap()]);
    }
    let a = std::fs::read(dir.path().join("a/dfn.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/dfn.csv")).unwrap();
    assert_ne!(a, b);
    assert!(String::from_utf8_lossy(&a).starts_with("id,cx,cy,length,angle,aperture,conductivity"));
}

#[test]
fn failures_emit_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();

    let e = error_json(&dfmup(&["homogenize", "--config", "/nonexistent/c.json", "--out", o]));
    assert_eq!(e["error"], "missing_input");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"momentum": 0.9}}"#).unwrap();
    let e = error_json(&dfmup(&["generate-srf", "--config", bad.to_str().unwrap(), "--out", o]));
    assert_eq!(e["error"], "invalid_config");
    assert!(e["message"].as_str().unwrap().contains("momentum"));

    let cfg = write_config(dir.path());
    let e = error_json(&dfmup(&["upscale", "--config", &cfg, "--backend", "surrogate", "--out", o]));
    assert_eq!(e["error"], "backend_unavailable");

    let e = error_json(&dfmup(&["train", "--config", &cfg, "--dataset", "/nonexistent", "--out", o]));
    assert_eq!(e["error"], "missing_input");

    let e = error_json(&dfmup(&["sweep", "--config", &cfg, "--param", "alpha", "--values", "1,2", "--out", o]));
    assert_eq!(e["error"], "invalid_argument");

    let e = error_json(&dfmup(&["no-such-command"]));
    assert_eq!(e["error"], "usage");
}

#[test]
fn pipeline_from_dataset_to_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    run_ok(&["build-dataset", "--config", &cfg, "--out", &p("data")]);
    run_ok(&["train", "--config", &cfg, "--dataset", &p("data/dataset"), "--out", &p("train")]);
    let hist = std::fs::read_to_string(dir.path().join("train/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);
    run_ok(&["evaluate", "--config", &cfg, "--dataset", &p("data/dataset"), "--model", &p("train/model"), "--out", &p("eval")]);
    assert_eq!(read_json(&dir.path().join("eval/evaluation.json"))["samples"], 8);

    run_ok(&["upscale", "--config", &cfg, "--backend", "surrogate", "--model", &p("train/model"), "--out", &p("up")]);
    assert!(dir.path().join("up/coarse.bin").exists());

    run_ok(&["bench-speedup", "--config", &cfg, "--blocks", "9", "--repetitions", "1", "--model", &p("train/model"), "--out", &p("speed")]);
    let rep = read_json(&dir.path().join("speed/speedup.json"));
    assert_eq!(rep["blocks"], 9);
    assert!(rep["fingerprint"]["threads"].as_u64().unwrap() >= 1);

    run_ok(&["bench-aquifer", "--config", &cfg, "--samples", "2", "--backends", "numeric,numeric", "--out", &p("aq")]);
    assert_eq!(read_json(&dir.path().join("aq/aquifer.json"))["r2"], 1.0);

    run_ok(&["sweep", "--config", &cfg, "--param", "rho", "--values", "2,4", "--samples", "6", "--model", &p("train/model"), "--out", &p("sw")]);
    assert_eq!(std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap().lines().count(), 3);
}

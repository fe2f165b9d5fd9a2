use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use sparsedom_cli::config::{validate, ExperimentConfig, ExperimentKind};
use sparsedom_cli::report::{run, RunError};

fn config(value: Value) -> ExperimentConfig {
    serde_json::from_value(value).unwrap()
}

fn small(kind: &str) -> Value {
    let mut v = json!({
        "kind": kind,
        "grid": { "R": 8.0, "h": 0.125 },
        "lattice": { "shift": 0.0, "s_min": -3, "s_max": 1 },
        "window": { "mu": -3, "nu": 1 },
        "trials": 2,
        "seed": 7,
    });
    match kind {
        "psf" => v["cubes"] = json!(["1:0", "-1:2"]),
        "assumption-l" => v["position"] = json!(2),
        "weights" => {
            v["weights"] = json!({ "estimate": "single", "q": 4.0, "weights": ["power:0.5"] })
        }
        "lp-decay" => v["lp"] = json!({ "j_min": -2, "j_max": 2, "cells": 32, "samples": 4 }),
        _ => {}
    }
    v
}

const KINDS: [&str; 7] = [
    "psf",
    "sparse-build",
    "dominate",
    "assumption-l",
    "weights",
    "lp-decay",
    "cz-props",
];

fn sparsedom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsedom"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, v: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn holder_triples() {
    let mut v = small("dominate");
    v["holder"] = json!([2.0, 2.0, 1.0]);
    assert!(validate(&config(v.clone())).is_empty());
    v["holder"] = json!([2.0, 2.0, 2.0]);
    let problems = validate(&config(v));
    assert_eq!(problems.len(), 1, "{problems:?}");
}

#[test]
fn lattice_must_reach_past_window() {
    let mut v = small("dominate");
    v["window"] = json!({ "mu": -3, "nu": 2 });
    let problems = validate(&config(v));
    assert!(
        problems
            .iter()
            .any(|p| p.contains("lattice top smaller than truncation top")),
        "{problems:?}"
    );
}

#[test]
fn every_violation_is_reported() {
    let mut v = small("dominate");
    v["exponents"] = json!([0.5, 1.1, 1.1]);
    v["window"] = json!({ "mu": 2, "nu": -2 });
    v["c_d"] = json!(-1.0);
    assert!(validate(&config(v)).len() >= 3);
}

#[test]
fn small_configs_are_valid() {
    for kind in KINDS {
        let problems = validate(&config(small(kind)));
        assert!(problems.is_empty(), "{kind}: {problems:?}");
    }
}

#[test]
fn defaults_are_valid() {
    for kind in [
        ExperimentKind::SparseBuild,
        ExperimentKind::Dominate,
        ExperimentKind::CzProps,
    ] {
        let problems = validate(&ExperimentConfig::new(kind));
        assert!(problems.is_empty(), "{kind:?}: {problems:?}");
    }
}

#[test]
fn psf_of_constants_is_total_measure() {
    let mut v = small("psf");
    v["inputs"] = json!(["one", "one", "one"]);
    let report = run(&config(v)).unwrap();
    let psf = report.payload.aggregates["psf"].as_f64().unwrap();
    assert!((psf - 2.5).abs() < 1e-12, "{psf}");
}

#[test]
fn zero_kernel_dominates_trivially() {
    let mut v = small("dominate");
    v["omega"] = json!("zero");
    let report = run(&config(v)).unwrap();
    assert_eq!(report.payload.records.len(), 2);
    for r in &report.payload.records {
        assert_eq!(r["ratio"].as_f64(), Some(0.0), "{r:?}");
    }
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let mut v = small("sparse-build");
    v["grid"] = json!({ "R": 8.0, "h": 0.3 });
    match run(&config(v)) {
        Err(e @ RunError::Invalid(_)) => {
            assert_eq!(e.kind(), "validation");
            assert_eq!(e.exit_code(), 2);
            assert_eq!(e.block()["error"]["kind"], "validation");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn runs_are_deterministic() {
    for kind in ["dominate", "sparse-build", "cz-props"] {
        let c = config(small(kind));
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.payload_json(), b.payload_json(), "{kind}");
    }
}

#[test]
fn binary_runs_every_kind() {
    for kind in KINDS {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &small(kind));
        let out = dir.path().join("out");
        let o = sparsedom(&[kind, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(
            o.status.success(),
            "{kind}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        let report: Value =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["experiment"], kind);
        assert_eq!(report["schema_version"], 1);
        let csv = fs::read_to_string(out.join("trials.csv")).unwrap();
        assert!(csv.lines().count() >= 2, "{kind}: {csv}");
    }
}

#[test]
fn binary_reports_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small("dominate");
    v["holder"] = json!([2.0, 2.0, 2.0]);
    v["window"] = json!({ "mu": -3, "nu": 2 });
    let cfg = write_config(dir.path(), &v);
    let o = sparsedom(&[
        "dominate",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "validation");
    assert_eq!(err["error"]["messages"].as_array().unwrap().len(), 2);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn binary_rejects_kind_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small("psf"));
    let o = sparsedom(&[
        "dominate",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn binary_payload_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small("dominate"));
    let mut payloads = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(threads);
        let o = sparsedom(&[
            "dominate",
            "--config",
            &cfg,
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report: Value =
            serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        payloads.push(report["payload"].to_string());
    }
    assert_eq!(payloads[0], payloads[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small("dominate"));
    let out = dir.path().join("o");
    let o = sparsedom(&[
        "dominate",
        "--config",
        &cfg,
        "--seed",
        "99",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 99);
}

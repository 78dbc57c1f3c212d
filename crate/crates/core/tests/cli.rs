// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use crl::cli::{load_config, load_task, RunManifest, RunStatus, MANIFEST};
use crl::diagnostics::brute_force_flipping_features;
use crl::ppo::eval_set;

fn crl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crl"))
        .args(args)
        .arg("--out")
        .arg(root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) {
    let out = crl(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join(MANIFEST)).unwrap()).unwrap()
}

const SHORT: [&str; 4] = ["--set", "ppo.max_steps=300", "--set", "ppo.eval_interval=100"];

#[test]
fn zero_coefficient_eval_matches_unsteered_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &[&["train"][..], &SHORT].concat());
    ok(root, &[&["eval", "--set", "steering.coefficient=0"][..], &SHORT].concat());
    ok(root, &["baseline", "none"]);
    let eval = std::fs::read(root.join("eval/results.csv")).unwrap();
    let base = std::fs::read(root.join("baseline-none/results.csv")).unwrap();
    assert_eq!(eval, base);
    let acc = |p: &str| {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join(p)).unwrap()).unwrap();
        v["accuracy"].as_f64().unwrap()
    };
    assert_eq!(acc("eval/report.json"), acc("baseline-none/report.json"));

    let m = manifest(&root.join("eval"));
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.coefficient, Some(0.0));
    assert!(m.files.iter().any(|f| f.path == "results.csv"));
    let t = manifest(&root.join("train"));
    assert_eq!(t.calibration_mode.as_deref(), Some("activation"));
    assert!(t.files.iter().any(|f| f.path == "checkpoints/best.crla"));
}

#[test]
fn top_impact_feature_flips_its_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &[&["train"][..], &SHORT].concat());
    ok(root, &[&["analyze", "features"][..], &SHORT].concat());

    let mut features = csv::Reader::from_path(root.join("analyze-features/features.csv")).unwrap();
    let top: usize = features.records().next().unwrap().unwrap()[0].parse().unwrap();
    let mut cats = csv::Reader::from_path(root.join("analyze-features/categories.csv")).unwrap();
    let corrected: Vec<usize> = cats
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == "corrected")
        .map(|r| r[0].parse().unwrap())
        .collect();
    let records = crl::diagnostics::read_records_jsonl(&root.join("analyze-features/interventions.jsonl")).unwrap();
    let contexts: Vec<usize> = records
        .iter()
        .filter(|r| r.feature == top && corrected.contains(&r.sample_id))
        .map(|r| r.sample_id)
        .collect();
    assert!(!contexts.is_empty());

    // Join against the brute-force oracle for the same planted task.
    let cfg = load_config(None, &[]).unwrap();
    let task = load_task(&cfg).unwrap();
    let samples = eval_set(&task.heldout, cfg.ppo.eval_samples);
    let info = task.info.as_ref().unwrap();
    for id in contexts {
        let flips =
            brute_force_flipping_features(&task.lm, &task.sae, &samples[id], info.hook_layer, info.coefficient, task.horizon)
                .unwrap();
        assert!(flips.contains(&top), "feature {top} not in flipping set {flips:?} of sample {id}");
    }
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = crl(root, &["--set", "mode=crl-layer", "train"]);
    assert_eq!(out.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(rec["error"], "config_invalid");

    let cfg = root.join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[ppo]\nclip = 0.1\n").unwrap();
    let out = crl(root, &["--config", cfg.to_str().unwrap(), "norms"]);
    assert_eq!(out.status.code(), Some(2));
    let rec: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(rec["message"].as_str().unwrap().contains("line 3"), "{rec}");

    assert_eq!(crl(root, &["frobnicate"]).status.code(), Some(2));
    let out = crl(root, &["--set", "task.planted.min_coverage=1.0", "--set", "task.planted.max_attempts=1", "plant"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(manifest(&root.join("plant")).status, RunStatus::Failed);

    let out = crl(root, &["eval", "--checkpoint", root.join("missing.crla").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plant_writes_a_reloadable_file_task() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["--set", "task.planted.n_train=32", "--set", "task.planted.n_heldout=32", "plant"]);
    let info: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("plant/task.json")).unwrap()).unwrap();
    let answers = info["answers"].to_string();
    let cfg = root.join("files.toml");
    std::fs::write(
        &cfg,
        format!(
            "[task]\nsource = \"files\"\nmodel = \"plant/model.crlm\"\ntrain = \"plant/train.jsonl\"\n\
             heldout = \"plant/heldout.jsonl\"\nanswers = {answers}\n[sae]\nsource = \"file\"\npath = \"plant/sae.crls\"\n"
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    ok(root, &["--config", c, "baseline", "none"]);
    ok(root, &["--config", c, "norms"]);
    let rows = csv::Reader::from_path(root.join("norms/norms.csv")).unwrap().records().count();
    assert_eq!(rows, 2);
}

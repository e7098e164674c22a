use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use posedet_core::dataio::METRICS_SCHEMA_JSON;
use serde_json::Value;

fn posedet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posedet")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = posedet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset with every trained artifact; returns the manifest path.
fn trained(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "scenes", "--out", s(&data), "--train", "40", "--val", "15", "--test", "10", "--seed", "3"]);
    let manifest = data.join("manifest.json");
    let m = s(&manifest);
    ok(&["fit-priors", "--manifest", m, "--out", s(&dir.join("priors.json"))]);
    ok(&["make-patches", "--manifest", m, "--out", s(&dir.join("patches.json"))]);
    let (patches, feats) = (dir.join("patches.json"), dir.join("patches.feat"));
    ok(&["synth", "patch-features", "--manifest", m, "--patches", s(&patches), "--out", s(&feats)]);
    ok(&[
        "train-appearance",
        "--manifest",
        m,
        "--patches",
        s(&patches),
        "--features",
        s(&feats),
        "--priors",
        s(&dir.join("priors.json")),
        "--out",
        s(&dir.join("appearance.json")),
    ]);
    manifest
}

fn edit_json(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn end_to_end_metrics_match_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = trained(d);
    let m = s(&manifest);
    let dets = d.join("dets.jsonl");
    ok(&[
        "detect",
        "--manifest",
        m,
        "--priors",
        s(&d.join("priors.json")),
        "--appearance",
        s(&d.join("appearance.json")),
        "--out",
        s(&dets),
    ]);
    let table = ok(&["evaluate", "--manifest", m, "--detections", s(&dets), "--out", s(&d.join("metrics.json")), "--curves", s(d)]);
    assert!(table.contains("mAP"));
    assert!(d.join("pr_hat.csv").exists());

    let schema: Value = serde_json::from_str(METRICS_SCHEMA_JSON).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&metrics).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    assert_eq!(metrics["ablation"], "full");
    assert!(metrics["proposal_stats"].is_object());

    let stats = d.join("stats.json");
    let table = ok(&["proposal-stats", "--manifest", m, "--out", s(&stats)]);
    assert!(table.contains("proposals/image"));
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(stats).unwrap()).unwrap();
    assert_eq!(stats["proposal_stats"], Value::Null);
    assert_eq!(stats["split"], "test");
}

#[test]
fn geometric_ablations_need_poses_but_appearance_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = trained(d);
    let mut stripped = String::new();
    edit_json(&manifest, |v| {
        let img = v["images"].as_array_mut().unwrap().iter_mut().find(|i| i["split"] == "test").unwrap();
        stripped = img["id"].as_str().unwrap().to_string();
        img.as_object_mut().unwrap().remove("pose");
    });
    let m = s(&manifest);
    let app = d.join("appearance.json");
    let priors = d.join("priors.json");

    let out = posedet(&["detect", "--manifest", m, "--priors", s(&priors), "--appearance", s(&app), "--out", s(&d.join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("`{stripped}`")), "{err}");
    assert!(!d.join("x.jsonl").exists());

    let dets = d.join("noGeo.jsonl");
    ok(&["detect", "--ablation", "no-geometric", "--manifest", m, "--appearance", s(&app), "--out", s(&dets)]);
    let text = std::fs::read_to_string(&dets).unwrap();
    assert!(text.lines().count() > 1);
    assert!(text.lines().next().unwrap().contains("no-geometric"));

    let out = posedet(&["detect", "--manifest", m, "--appearance", s(&app), "--out", s(&dets)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["synth", "scenes", "--out", s(&data), "--train", "12", "--val", "0", "--test", "0"]);
    let manifest = data.join("manifest.json");
    let m = s(&manifest);
    let priors = d.join("priors.json");
    ok(&["fit-priors", "--manifest", m, "--out", s(&priors)]);

    // An empty split writes a header-only detections file.
    let dets = d.join("dets.jsonl");
    ok(&["detect", "--ablation", "no-appearance", "--manifest", m, "--priors", s(&priors), "--out", s(&dets)]);
    assert_eq!(std::fs::read_to_string(&dets).unwrap().lines().count(), 1);

    edit_json(&priors, |v| v["version"] = Value::from(99));
    let out = posedet(&["detect", "--ablation", "no-appearance", "--manifest", m, "--priors", s(&priors), "--out", s(&dets)]);
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(&priors, "{ not json").unwrap();
    let out = posedet(&["detect", "--ablation", "no-appearance", "--manifest", m, "--priors", s(&priors), "--out", s(&dets)]);
    assert_eq!(out.status.code(), Some(4));

    let out = posedet(&["fit-priors", "--manifest", s(&d.join("missing.json")), "--out", s(&priors)]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"nms_iou": 1.5}"#).unwrap();
    let out = posedet(&["fit-priors", "--config", s(&cfg), "--manifest", m, "--out", s(&priors)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

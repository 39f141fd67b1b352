use std::path::Path;
use std::process::Command;

use groundcap::model::ModelConfig;
use groundcap::runner::TrainConfig;
use groundcap::vocab::Vocabulary;

fn groundcap(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_groundcap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "groundcap {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(path: &Path) {
    let vocab = Vocabulary::default();
    let mut cfg = TrainConfig::desk(vocab.len());
    cfg.model = ModelConfig::tiny(vocab.len());
    for c in [&mut cfg.train_corpus, &mut cfg.val_corpus] {
        c.num_scenes = 3;
        c.scene.max_objects = 4;
    }
    cfg.pretrain.schedule.epochs = 1;
    cfg.mle.schedule.epochs = 1;
    cfg.scst.schedule.epochs = 1;
    std::fs::write(path, cfg.to_toml().unwrap()).unwrap();
}

#[test]
fn init_config_presets_parse() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["desk", "full"] {
        let path = dir.path().join(format!("{preset}.toml"));
        groundcap(&["init-config", "--preset", preset, "--out", p(&path)]);
        TrainConfig::load(&path).unwrap();
    }
}

#[test]
fn full_pipeline_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    tiny_config(&cfg);
    let (train, val) = (d.join("train"), d.join("val"));
    groundcap(&["gen-data", "--config", p(&cfg), "--split", "train", "--out", p(&train)]);
    groundcap(&["gen-data", "--config", p(&cfg), "--split", "val", "--out", p(&val)]);

    let (pre, mle, scst) = (d.join("pre.safetensors"), d.join("mle.safetensors"), d.join("scst.safetensors"));
    groundcap(&["pretrain-vg", "--config", p(&cfg), "--data", p(&train), "--out", p(&pre)]);
    groundcap(&["train-mle", "--data", p(&train), "--init", p(&pre), "--out", p(&mle), "--scheme", "3"]);
    groundcap(&["train-scst", "--data", p(&train), "--init", p(&mle), "--out", p(&scst)]);

    let report = d.join("vg.json");
    let dump = d.join("vg.jsonl");
    groundcap(&[
        "eval", "--task", "vg", "--data", p(&val), "--checkpoint", p(&scst), "--report", p(&report), "--dump", p(&dump),
    ]);
    let from_model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(from_model["acc@0.25/overall"].is_number());
    let rescored: serde_json::Value = serde_json::from_str(&groundcap(&[
        "eval", "--task", "vg", "--data", p(&val), "--predictions", p(&dump),
    ]))
    .unwrap();
    assert_eq!(from_model, rescored);

    let dc: serde_json::Value = serde_json::from_str(&groundcap(&[
        "eval", "--task", "dc", "--data", p(&val), "--checkpoint", p(&scst), "--predict-labels",
    ]))
    .unwrap();
    assert!(dc["cider@0.5"].as_f64().unwrap() >= 0.0);

    let scenes = std::fs::read_to_string(val.join("scenes.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(scenes.lines().next().unwrap()).unwrap();
    let scene = first["scene_id"].as_str().unwrap();
    let label = first["objects"][0]["class_label"].as_str().unwrap();
    let vg: serde_json::Value = serde_json::from_str(&groundcap(&[
        "infer", "--checkpoint", p(&scst), "--data", p(&val), "--scene", scene, "--text", &format!("the {label} ."),
    ]))
    .unwrap();
    assert!(vg["score"].is_number());
    let dense: serde_json::Value =
        serde_json::from_str(&groundcap(&["infer", "--checkpoint", p(&scst), "--data", p(&val), "--scene", scene]))
            .unwrap();
    assert!(dense["preds"].is_array());
}

#[test]
fn bad_scheme_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_groundcap"))
        .args(["train-mle", "--data", "x", "--init", "y", "--out", "z", "--scheme", "7"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

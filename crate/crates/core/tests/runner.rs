mod common;

use std::collections::BTreeMap;

use groundcap::model::{GroundCap, ModelConfig};
use groundcap::runner::{
    checkpoint, no_hook, train_joint_mle, train_scst, train_vg_pretrain, Dataset, Scheme, TrainConfig,
};
use groundcap::vocab::Vocabulary;

fn tiny_config(vocab: &Vocabulary) -> TrainConfig {
    let mut cfg = TrainConfig::desk(vocab.len());
    cfg.model = ModelConfig::tiny(vocab.len());
    cfg.pretrain.schedule.epochs = 2;
    cfg.pretrain.schedule.batch_size = 2;
    cfg.mle.schedule.epochs = 1;
    cfg.mle.schedule.batch_size = 2;
    cfg.scst.schedule.epochs = 1;
    cfg.scst.schedule.batch_size = 2;
    cfg
}

fn setup() -> (Vocabulary, TrainConfig, Dataset) {
    let vocab = Vocabulary::default();
    let cfg = tiny_config(&vocab);
    let (corpus, _) = common::tiny_corpus(&vocab, 4, 4);
    let data = Dataset::prepare(&corpus, &vocab, &cfg.model).unwrap();
    (vocab, cfg, data)
}

fn snapshot(m: &GroundCap) -> BTreeMap<String, Vec<f32>> {
    m.params
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

fn changed(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>) -> Vec<String> {
    a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.clone()).collect()
}

#[test]
fn pretrain_is_seed_deterministic() {
    let (_, cfg, data) = setup();
    let a = train_vg_pretrain(&cfg, &data, None, &mut no_hook()).unwrap();
    let b = train_vg_pretrain(&cfg, &data, None, &mut no_hook()).unwrap();
    let losses = |t: &groundcap::runner::Trained| t.logs.iter().map(|l| l.mean_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(snapshot(&a.model), snapshot(&b.model));
}

#[test]
fn resumed_pretrain_matches_uninterrupted_run() {
    let (_, cfg, data) = setup();
    let full = train_vg_pretrain(&cfg, &data, None, &mut no_hook()).unwrap();

    let mut first = cfg.clone();
    first.pretrain.schedule.epochs = 1;
    let half = train_vg_pretrain(&first, &data, None, &mut no_hook()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.safetensors");
    half.save(&path).unwrap();
    let resumed = train_vg_pretrain(&cfg, &data, Some(checkpoint::load(&path).unwrap()), &mut no_hook()).unwrap();

    assert_eq!(resumed.logs.len(), 1);
    assert_eq!(resumed.logs[0].mean_loss, full.logs[1].mean_loss);
    assert_eq!(resumed.meta.opt_step, full.meta.opt_step);
    assert_eq!(snapshot(&resumed.model), snapshot(&full.model));
}

#[test]
fn pretrain_leaves_caption_head_alone() {
    let (_, cfg, data) = setup();
    let init = snapshot(&GroundCap::new(&cfg.model, cfg.seed, candle_core::DType::F32).unwrap());
    let out = train_vg_pretrain(&cfg, &data, None, &mut no_hook()).unwrap();
    let moved = changed(&init, &snapshot(&out.model));
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|n| !n.starts_with("captioner.")), "{moved:?}");
    assert!(out.logs.last().unwrap().mean_loss < out.logs[0].mean_loss);
}

#[test]
fn frozen_scheme_trains_only_the_caption_head() {
    let (_, mut cfg, data) = setup();
    cfg.mle.scheme = Scheme::DcFrozen;
    let vg = GroundCap::new(&cfg.model, cfg.seed, candle_core::DType::F32).unwrap();
    let before = snapshot(&vg);
    let out = train_joint_mle(&cfg, &data, vg, &mut no_hook()).unwrap();
    let moved = changed(&before, &snapshot(&out.model));
    assert!(moved.iter().any(|n| n.starts_with("captioner.")));
    assert!(moved.iter().all(|n| n.starts_with("captioner.")), "{moved:?}");
}

#[test]
fn two_rate_scheme_trains_everything() {
    let (_, mut cfg, data) = setup();
    cfg.mle.scheme = Scheme::JointTwoLr;
    let vg = GroundCap::new(&cfg.model, cfg.seed, candle_core::DType::F32).unwrap();
    let before = snapshot(&vg);
    let out = train_joint_mle(&cfg, &data, vg, &mut no_hook()).unwrap();
    let moved = changed(&before, &snapshot(&out.model));
    assert!(moved.iter().any(|n| n.starts_with("captioner.")));
    assert!(moved.iter().any(|n| !n.starts_with("captioner.")));
}

#[test]
fn scst_trains_only_the_caption_head() {
    let (vocab, cfg, data) = setup();
    let model = GroundCap::new(&cfg.model, cfg.seed, candle_core::DType::F32).unwrap();
    let before = snapshot(&model);
    let out = train_scst(&cfg, &data, &vocab, model, &mut no_hook()).unwrap();
    let moved = changed(&before, &snapshot(&out.model));
    assert!(moved.iter().all(|n| n.starts_with("captioner.")), "{moved:?}");
}

#[test]
fn mle_rejects_mismatched_model() {
    let (_, cfg, data) = setup();
    let other = ModelConfig {
        d: 8,
        ..cfg.model.clone()
    };
    let vg = GroundCap::new(&other, 1, candle_core::DType::F32).unwrap();
    assert!(train_joint_mle(&cfg, &data, vg, &mut no_hook()).is_err());
}

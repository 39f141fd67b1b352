//! Held-out evaluation: prediction dumps and JSON metric reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::infer::{infer_dc, infer_vg, DcOptions};
use crate::datagen::{write_jsonl, Stratum, TextKind};
use crate::error::{Error, Result};
use crate::metrics::{
    acc_at_iou, detection_recall, m_at_k_iou, Aabb, CaptionMetric, DenseGt, DenseScene, IOU_THRESHOLDS,
};
use crate::model::GroundCap;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vg,
    Dc,
}

/// Flat metric map; keys are stable across runs.
pub type Report = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgPrediction {
    pub scene_id: String,
    pub text: String,
    pub target_id: u32,
    pub stratum: Stratum,
    pub pred: Aabb,
    pub score: f64,
    pub gt: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcPrediction {
    pub scene_id: String,
    #[serde(flatten)]
    pub scene: DenseScene,
}

pub fn vg_report(preds: &[VgPrediction]) -> Result<Report> {
    let boxes: Vec<Option<Aabb>> = preds.iter().map(|p| Some(p.pred)).collect();
    let gts: Vec<Aabb> = preds.iter().map(|p| p.gt).collect();
    let strata: Vec<Stratum> = preds.iter().map(|p| p.stratum).collect();
    let rec = acc_at_iou(&boxes, &gts, &strata)?;
    let mut out = Report::new();
    for t in IOU_THRESHOLDS {
        for (name, st) in [
            ("unique", Some(Stratum::Unique)),
            ("multiple", Some(Stratum::Multiple)),
            ("overall", None),
        ] {
            out.insert(format!("acc@{t}/{name}"), rec.accuracy(t, st));
        }
    }
    out.insert("count/unique".into(), rec.count(Some(Stratum::Unique)) as f64);
    out.insert("count/multiple".into(), rec.count(Some(Stratum::Multiple)) as f64);
    out.insert("count/overall".into(), rec.count(None) as f64);
    Ok(out)
}

pub fn dc_report(preds: &[DcPrediction]) -> Result<Report> {
    let scenes: Vec<DenseScene> = preds.iter().map(|p| p.scene.clone()).collect();
    let mut out = Report::new();
    for t in IOU_THRESHOLDS {
        for m in CaptionMetric::ALL {
            out.insert(format!("{}@{t}", m.name()), m_at_k_iou(&scenes, m, t)?);
        }
        out.insert(format!("recall@{t}"), detection_recall(&scenes, t)?);
    }
    out.insert("objects".into(), scenes.iter().map(|s| s.gts.len()).sum::<usize>() as f64);
    out.insert(
        "predictions".into(),
        scenes.iter().map(|s| s.preds.len()).sum::<usize>() as f64,
    );
    Ok(out)
}

pub fn predict_vg(model: &GroundCap, data: &Dataset) -> Result<Vec<VgPrediction>> {
    let texts: Vec<usize> = (0..data.texts.len())
        .filter(|&t| data.texts[t].kind() == TextKind::Reference)
        .collect();
    let outs = infer_vg(model, data, &texts)?;
    texts
        .iter()
        .zip(outs)
        .map(|(&t, (pred, score))| {
            let text = &data.texts[t];
            let target = &text.targets[0];
            Ok(VgPrediction {
                scene_id: text.sample.scene_id.clone(),
                text: text.sample.raw_text.clone(),
                target_id: target.object_id,
                stratum: text
                    .sample
                    .stratum
                    .ok_or_else(|| Error::config("reference without stratum"))?,
                pred,
                score,
                gt: target.aabb,
            })
        })
        .collect()
}

pub fn predict_dc(model: &GroundCap, data: &Dataset, vocab: &Vocabulary, opts: &DcOptions) -> Result<Vec<DcPrediction>> {
    data.scenes
        .iter()
        .map(|s| {
            let gts = s
                .scene
                .objects
                .iter()
                .map(|o| DenseGt {
                    aabb: o.aabb(),
                    references: s.caption_text[&o.id].clone(),
                })
                .collect();
            Ok(DcPrediction {
                scene_id: s.scene.scene_id.clone(),
                scene: DenseScene {
                    gts,
                    preds: infer_dc(model, s, vocab, opts)?,
                },
            })
        })
        .collect()
}

/// Runs inference for `task`, optionally dumping predictions as JSONL.
pub fn evaluate(
    model: &GroundCap,
    data: &Dataset,
    vocab: &Vocabulary,
    task: Task,
    opts: &DcOptions,
    dump: Option<&Path>,
) -> Result<Report> {
    match task {
        Task::Vg => {
            let preds = predict_vg(model, data)?;
            if let Some(p) = dump {
                write_jsonl(p, &preds)?;
            }
            vg_report(&preds)
        }
        Task::Dc => {
            let preds = predict_dc(model, data, vocab, opts)?;
            if let Some(p) = dump {
                write_jsonl(p, &preds)?;
            }
            dc_report(&preds)
        }
    }
}

pub fn write_report(path: impl AsRef<Path>, report: &Report) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

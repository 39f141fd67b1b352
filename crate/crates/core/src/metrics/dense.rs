use serde::{Deserialize, Serialize};

use super::boxes::{iou_aabb, Aabb};
use super::language::{bleu4, rouge_l, CiderD};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionMetric {
    Cider,
    Bleu4,
    RougeL,
}

impl CaptionMetric {
    pub const ALL: [CaptionMetric; 3] = [Self::Cider, Self::Bleu4, Self::RougeL];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cider => "cider",
            Self::Bleu4 => "bleu4",
            Self::RougeL => "rouge_l",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGt {
    pub aabb: Aabb,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensePred {
    pub aabb: Aabb,
    pub score: f64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseScene {
    pub gts: Vec<DenseGt>,
    pub preds: Vec<DensePred>,
}

/// Best-IoU prediction for `gt`, ties to the lowest prediction index.
fn best_match(gt: &Aabb, preds: &[DensePred]) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in preds.iter().enumerate() {
        let iou = iou_aabb(&p.aabb, gt)?;
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    Ok(best)
}

/// `m@kIoU`: every GT object takes its best-overlapping prediction; the
/// caption metric counts when that IoU reaches `k`, otherwise the object
/// scores 0. Averaged over all GT objects of the corpus. CIDEr-D document
/// frequencies come from the GT reference sets of the whole corpus.
pub fn m_at_k_iou(scenes: &[DenseScene], metric: CaptionMetric, k: f64) -> Result<f64> {
    let all_refs: Vec<Vec<String>> = scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.references.clone()))
        .collect();
    if all_refs.is_empty() {
        return Ok(0.0);
    }
    let cider = (metric == CaptionMetric::Cider).then(|| CiderD::new(&all_refs));
    let mut total = 0.0;
    for scene in scenes {
        for gt in &scene.gts {
            let Some((i, iou)) = best_match(&gt.aabb, &scene.preds)? else {
                continue;
            };
            if iou < k {
                continue;
            }
            let cand = scene.preds[i].caption.as_str();
            total += match metric {
                CaptionMetric::Cider => cider.as_ref().unwrap().score(cand, &gt.references),
                CaptionMetric::Bleu4 => bleu4(cand, &gt.references),
                CaptionMetric::RougeL => rouge_l(cand, &gt.references),
            };
        }
    }
    Ok(total / all_refs.len() as f64)
}

/// Fraction of GT objects covered by some prediction at IoU >= `k`.
pub fn detection_recall(scenes: &[DenseScene], k: f64) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for scene in scenes {
        for gt in &scene.gts {
            total += 1;
            if best_match(&gt.aabb, &scene.preds)?.is_some_and(|(_, iou)| iou >= k) {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Greedy NMS on descending score; a box is dropped when its IoU with a kept
/// box exceeds `threshold`. Returns kept indices in score order.
pub fn nms(boxes: &[Aabb], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let mut suppressed = false;
        for &j in &keep {
            if iou_aabb(&boxes[i], &boxes[j])? > threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(i);
        }
    }
    Ok(keep)
}

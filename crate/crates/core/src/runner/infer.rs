//! Grounding and dense-captioning inference.

use std::ops::Range;

use candle_core::DType;

use super::data::{Dataset, PreparedScene};
use super::train::forward_texts;
use crate::datagen::{build_caption_prompt, TextSample};
use crate::error::Result;
use crate::metrics::{nms, Aabb, DensePred};
use crate::model::{referring_scores, GroundCap, SceneGeometry};
use crate::vocab::{Vocabulary, LABELS};

/// Texts per forward pass at inference.
const INFER_BATCH: usize = 32;

/// Box of the query with the highest referring score for each text's
/// first span, with that score.
pub fn infer_vg(model: &GroundCap, data: &Dataset, texts: &[usize]) -> Result<Vec<(Aabb, f64)>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(INFER_BATCH) {
        let fwd = forward_texts(model, data, chunk)?;
        let last = fwd.last();
        let boxes: Vec<Vec<Vec<f64>>> = last.boxes.to_dtype(DType::F64)?.to_vec3()?;
        let align: Vec<Vec<Vec<f64>>> = last.align.to_dtype(DType::F64)?.to_vec3()?;
        for (i, &t) in chunk.iter().enumerate() {
            let span = data.texts[t]
                .sample
                .span_map
                .first()
                .map(|s| s.range())
                .ok_or(crate::Error::EmptySpan)?;
            let scores = referring_scores(&align[i], span)?;
            let best = crate::model::top_k(&scores, 1)[0];
            out.push((Aabb::from_slice(&boxes[i][best]), scores[best]));
        }
    }
    Ok(out)
}

/// First label word of a tokenized text, as a one-token span.
pub fn head_noun_span(token_ids: &[u32], vocab: &Vocabulary) -> Result<Range<usize>> {
    for (i, &id) in token_ids.iter().enumerate() {
        if crate::vocab::is_label(vocab.token(id)?) {
            return Ok(i..i + 1);
        }
    }
    Err(crate::Error::EmptySpan)
}

/// Grounds a free-form text in one scene; returns the chosen box and its score.
pub fn ground_text(model: &GroundCap, scene: &PreparedScene, token_ids: &[u32], span: Range<usize>) -> Result<(Aabb, f64)> {
    let fwd = model.forward_vg(&[&scene.geometry], &[token_ids], &[0])?;
    let last = fwd.last();
    let boxes = last.boxes.to_dtype(DType::F64)?.to_vec3::<f64>()?.remove(0);
    let align = last.align.to_dtype(DType::F64)?.to_vec3::<f64>()?.remove(0);
    let scores = referring_scores(&align, span)?;
    let best = crate::model::top_k(&scores, 1)[0];
    Ok((Aabb::from_slice(&boxes[best]), scores[best]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcOptions {
    /// Minimum referring score to any positive span.
    pub tau: f64,
    pub nms_iou: f64,
    /// Derive positive labels from the model instead of the ground truth.
    pub predict_labels: bool,
}

impl Default for DcOptions {
    fn default() -> Self {
        Self {
            tau: 0.5,
            nms_iou: 0.25,
            predict_labels: false,
        }
    }
}

/// Per query, the best referring score over `spans` and that span's index.
fn best_spans(align: &[Vec<f64>], spans: &[Range<usize>]) -> Result<Vec<(f64, usize)>> {
    let mut best = vec![(f64::NEG_INFINITY, 0); align.len()];
    for (j, span) in spans.iter().enumerate() {
        for (q, s) in referring_scores(align, span.clone())?.into_iter().enumerate() {
            if s > best[q].0 {
                best[q] = (s, j);
            }
        }
    }
    Ok(best)
}

/// Prompt listing `labels` with one span per label. The labels go in as
/// negatives so no span is tied to ground-truth objects.
fn label_prompt(scene: &PreparedScene, labels: &[String], vocab: &Vocabulary) -> Result<(TextSample, Vec<Range<usize>>)> {
    let prompt = build_caption_prompt(&scene.scene, &[], labels, None, vocab)?;
    let spans = prompt.span_map.iter().map(|s| s.range()).collect();
    Ok((prompt, spans))
}

fn ground_prompt(
    model: &GroundCap,
    geometry: &SceneGeometry,
    prompt: &TextSample,
) -> Result<(crate::model::VgForward, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let fwd = model.forward_vg(&[geometry], &[prompt.token_ids.as_slice()], &[0])?;
    let last = fwd.last();
    let boxes = last.boxes.to_dtype(DType::F64)?.to_vec3::<f64>()?.remove(0);
    let align = last.align.to_dtype(DType::F64)?.to_vec3::<f64>()?.remove(0);
    Ok((fwd, boxes, align))
}

/// Labels whose span in an all-label prompt draws a query score of at least `tau`.
pub fn predict_labels(model: &GroundCap, scene: &PreparedScene, vocab: &Vocabulary, tau: f64) -> Result<Vec<String>> {
    let all: Vec<String> = LABELS.iter().map(|s| s.to_string()).collect();
    let (prompt, spans) = label_prompt(scene, &all, vocab)?;
    let (_, _, align) = ground_prompt(model, &scene.geometry, &prompt)?;
    let best = best_spans(&align, &spans)?;
    let mut hit = vec![false; all.len()];
    for (s, j) in best {
        if s >= tau {
            hit[j] = true;
        }
    }
    Ok(all.into_iter().zip(hit).filter(|(_, h)| *h).map(|(l, _)| l).collect())
}

/// Detects and captions the objects named by the positive-label prompt.
pub fn infer_dc(model: &GroundCap, scene: &PreparedScene, vocab: &Vocabulary, opts: &DcOptions) -> Result<Vec<DensePred>> {
    let positives = if opts.predict_labels {
        predict_labels(model, scene, vocab, opts.tau)?
    } else {
        scene.scene.labels()
    };
    if positives.is_empty() {
        return Ok(Vec::new());
    }
    let (prompt, spans) = label_prompt(scene, &positives, vocab)?;
    let (fwd, boxes, align) = ground_prompt(model, &scene.geometry, &prompt)?;
    let best = best_spans(&align, &spans)?;
    let kept: Vec<usize> = (0..best.len()).filter(|&q| best[q].0 >= opts.tau).collect();
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let cand: Vec<Aabb> = kept.iter().map(|&q| Aabb::from_slice(&boxes[q])).collect();
    let scores: Vec<f64> = kept.iter().map(|&q| best[q].0).collect();
    let survivors = nms(&cand, &scores, opts.nms_iou)?;
    let pairs: Vec<(usize, usize)> = survivors.iter().map(|&i| (0, kept[i])).collect();
    let (q, v) = model.caption_inputs(&fwd, &pairs)?;
    let caps = model.captioner.greedy(&q, &v, model.cfg.caption_max_len)?;
    survivors
        .iter()
        .zip(&caps.tokens)
        .map(|(&i, toks)| {
            Ok(DensePred {
                aabb: cand[i],
                score: scores[i],
                caption: vocab.decode(toks)?,
            })
        })
        .collect()
}

//! Training objectives: set matching, decoder-layer terms, KPS, captioning.

pub mod matching;

use std::ops::Range;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

pub use matching::{cost_matrix, hungarian, hungarian_match, Matching, TargetObject};

use crate::error::Result;
use crate::metrics::Aabb;
use crate::model::nn::{index_tensor, log_softmax_last, logsumexp_last, softplus, tensor, MASK_NEG};
use crate::model::VgForward;
use crate::vocab::PAD;

/// Loss weight applied to queries pushed to the no-object slot.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
/// Positive tokens per object for KPS supervision.
pub const KPS_POSITIVES: usize = 4;
/// Containment slack for KPS positives (meters).
pub const KPS_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Grounding, captioning, KPS.
    pub alpha: [f64; 3],
    /// Coordinate, size, GIoU, semantic alignment, position alignment.
    pub beta: [f64; 5],
}

impl LossWeights {
    pub fn scanrefer(decoder_layers: usize) -> Self {
        Self {
            alpha: [1.0 / (decoder_layers as f64 + 1.0), 5.0, 8.0],
            beta: [5.0, 1.0, 1.0, 0.5, 0.5],
        }
    }

    pub fn nr3d(decoder_layers: usize) -> Self {
        Self {
            beta: [5.0, 1.0, 1.0, 1.0, 1.0],
            ..Self::scanrefer(decoder_layers)
        }
    }
}

/// Smooth-L1 with transition 1, averaged over every element.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let a = (pred - gt)?.abs()?;
    let m = a.minimum(1.0)?;
    // m * (|x| - m/2) is x^2/2 inside the transition and |x| - 1/2 beyond it
    Ok((&m * (a - (&m * 0.5)?)?)?.mean_all()?)
}

/// `(M, 6)` boxes: smooth-L1 on centers.
pub fn loss_coord(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    smooth_l1(&pred.narrow(1, 0, 3)?, &gt.narrow(1, 0, 3)?)
}

/// `(M, 6)` boxes: smooth-L1 on sizes.
pub fn loss_size(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    smooth_l1(&pred.narrow(1, 3, 3)?, &gt.narrow(1, 3, 3)?)
}

fn volume(x: &Tensor) -> Result<Tensor> {
    Ok((x.narrow(1, 0, 1)? * x.narrow(1, 1, 1)?)?.mul(&x.narrow(1, 2, 1)?)?.squeeze(1)?)
}

/// Row-wise GIoU of two `(M, 6)` center+size tensors: `(M,)`.
pub fn giou_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let corners = |x: &Tensor| -> Result<(Tensor, Tensor, Tensor)> {
        let c = x.narrow(1, 0, 3)?;
        let s = x.narrow(1, 3, 3)?;
        let h = (&s * 0.5)?;
        Ok(((&c - &h)?, (&c + &h)?, s))
    };
    let (amin, amax, asz) = corners(a)?;
    let (bmin, bmax, bsz) = corners(b)?;
    let inter = volume(&(amax.minimum(&bmax)? - amin.maximum(&bmin)?)?.relu()?)?;
    let union = ((volume(&asz)? + volume(&bsz)?)? - &inter)?;
    let hull = volume(&(amax.maximum(&bmax)? - amin.minimum(&bmin)?)?)?;
    let iou = (&inter / &union)?;
    Ok((iou - ((&hull - &union)? / &hull)?)?)
}

/// Mean of `1 - GIoU` over rows.
pub fn loss_giou(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(giou_tensor(pred, gt)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// Alignment targets of one text sample over the `T'` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAlign {
    /// Target span per query, `None` when unmatched.
    pub query_span: Vec<Option<Range<usize>>>,
    /// Column of the no-object slot.
    pub no_object: usize,
}

impl SampleAlign {
    pub fn new(num_queries: usize, matching: &Matching, targets: &[TargetObject], no_object: usize) -> Self {
        let mut query_span = vec![None; num_queries];
        for &(q, g) in &matching.pairs {
            query_span[q] = Some(targets[g].span.clone());
        }
        Self { query_span, no_object }
    }

    /// For every column covered by some matched span: the queries whose span covers it.
    pub fn token_queries(&self) -> Vec<(usize, Vec<usize>)> {
        let mut cols: Vec<usize> = self.query_span.iter().flatten().flat_map(|r| r.clone()).collect();
        cols.sort_unstable();
        cols.dedup();
        cols.into_iter()
            .map(|t| {
                let qs = (0..self.query_span.len())
                    .filter(|&q| self.query_span[q].as_ref().is_some_and(|r| r.contains(&t)))
                    .collect();
                (t, qs)
            })
            .collect()
    }
}

/// Cross-entropy against uniform mass on `target`: `lse(x) - lse(x | target)`.
fn masked_ce(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let all = logsumexp_last(logits)?;
    let bias = target.affine(-MASK_NEG, MASK_NEG)?;
    let sub = logsumexp_last(&(logits + bias)?)?;
    Ok((all - sub)?.squeeze(D::Minus1)?)
}

/// Query-to-token term of the semantic alignment loss. `align`: `(B, k, c)`.
pub fn loss_sem_q2t(align: &Tensor, targets: &[SampleAlign], no_object_weight: f64) -> Result<Tensor> {
    let (b, k, c) = align.dims3()?;
    let mut mask = vec![0.0; b * k * c];
    let mut w = vec![0.0; b * k];
    for (i, s) in targets.iter().enumerate() {
        for q in 0..k {
            let row = (i * k + q) * c;
            match &s.query_span[q] {
                Some(r) => {
                    r.clone().for_each(|t| mask[row + t] = 1.0);
                    w[i * k + q] = 1.0;
                }
                None => {
                    mask[row + s.no_object] = 1.0;
                    w[i * k + q] = no_object_weight;
                }
            }
        }
    }
    let (dt, dev) = (align.dtype(), align.device());
    let ce = masked_ce(align, &tensor(mask, &[b, k, c], dt, dev)?)?;
    let total: f64 = w.iter().sum();
    let w = tensor(w, &[b, k], dt, dev)?;
    Ok(((ce * w)?.sum_all()? / total)?)
}

/// Token-to-query term: softmax over queries per span column.
pub fn loss_sem_t2q(align: &Tensor, targets: &[SampleAlign]) -> Result<Tensor> {
    let (b, k, c) = align.dims3()?;
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    for (i, s) in targets.iter().enumerate() {
        for (t, qs) in s.token_queries() {
            rows.push(i * c + t);
            let mut m = vec![0.0; k];
            qs.iter().for_each(|&q| m[q] = 1.0);
            mask.extend(m);
        }
    }
    if rows.is_empty() {
        return Ok(align.zeros_like()?.sum_all()?);
    }
    let (dt, dev) = (align.dtype(), align.device());
    let n = rows.len();
    let cols = align.transpose(1, 2)?.contiguous()?.reshape((b * c, k))?;
    let picked = cols.index_select(&index_tensor(&rows, dev)?, 0)?;
    let ce = masked_ce(&picked, &tensor(mask, &[n, k], dt, dev)?)?;
    Ok(ce.mean_all()?)
}

/// Symmetric semantic alignment loss: mean of both directions.
pub fn loss_sem(align: &Tensor, targets: &[SampleAlign], no_object_weight: f64) -> Result<Tensor> {
    let q2t = loss_sem_q2t(align, targets, no_object_weight)?;
    let t2q = loss_sem_t2q(align, targets)?;
    Ok(((q2t + t2q)? * 0.5)?)
}

/// KL(uniform span || softmax(pos_align)) averaged over matched queries.
pub fn loss_pos(pos_align: &Tensor, targets: &[SampleAlign]) -> Result<Tensor> {
    let (b, k, c) = pos_align.dims3()?;
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut log_size = 0.0;
    for (i, s) in targets.iter().enumerate() {
        for (q, span) in s.query_span.iter().enumerate() {
            if let Some(r) = span {
                rows.push(i * k + q);
                let mut m = vec![0.0; c];
                r.clone().for_each(|t| m[t] = 1.0 / r.len() as f64);
                weights.extend(m);
                log_size += (r.len() as f64).ln();
            }
        }
    }
    if rows.is_empty() {
        return Ok(pos_align.zeros_like()?.sum_all()?);
    }
    let (dt, dev) = (pos_align.dtype(), pos_align.device());
    let n = rows.len();
    let x = pos_align.reshape((b * k, c))?.index_select(&index_tensor(&rows, dev)?, 0)?;
    let w = tensor(weights, &[n, c], dt, dev)?;
    // masked columns carry MASK_NEG but zero weight
    let span_mean = (&x * &w)?.sum(1)?;
    let lse = logsumexp_last(&x)?.squeeze(1)?;
    Ok((((lse - span_mean)?.sum_all()? - log_size)? / n as f64)?)
}

/// KPS targets of one sample: the nearest in-box tokens of every object are positive.
pub fn kps_targets(tokens: &[[f64; 3]], objects: &[Aabb]) -> Vec<f64> {
    let mut y = vec![0.0; tokens.len()];
    for o in objects {
        let mut inside: Vec<(f64, usize)> = tokens
            .iter()
            .enumerate()
            .filter(|(_, p)| o.contains(**p, KPS_TOLERANCE))
            .map(|(i, p)| {
                let d: f64 = (0..3).map(|a| (p[a] - o.center[a]).powi(2)).sum();
                (d, i)
            })
            .collect();
        inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in inside.iter().take(KPS_POSITIVES) {
            y[i] = 1.0;
        }
    }
    y
}

/// Binary cross-entropy on objectness logits, mean over all tokens.
pub fn loss_kps(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok((softplus(logits)? - (logits * targets)?)?.mean_all()?)
}

/// Teacher-forced cross-entropy. `logits (P, T, V)` come from feeding `seqs`
/// (SOS ... EOS); position `i` predicts `seqs[i + 1]`.
pub fn loss_cap_mle(logits: &Tensor, seqs: &[Vec<u32>]) -> Result<Tensor> {
    let (p, t, _) = logits.dims3()?;
    let mut tgt = Vec::with_capacity(p * t);
    let mut mask = Vec::with_capacity(p * t);
    for s in seqs {
        for i in 0..t {
            let next = s.get(i + 1).copied();
            tgt.push(next.unwrap_or(PAD));
            mask.push(if next.is_some() { 1.0 } else { 0.0 });
        }
    }
    let steps: f64 = mask.iter().sum();
    if steps == 0.0 {
        return Ok(logits.zeros_like()?.sum_all()?);
    }
    let dev = logits.device();
    let tgt = Tensor::from_vec(tgt, (p, t, 1), dev)?;
    let mask = tensor(mask, &[p, t], logits.dtype(), dev)?;
    let lp = log_softmax_last(logits)?.gather(&tgt, D::Minus1)?.squeeze(D::Minus1)?;
    Ok(((lp * mask)?.sum_all()? / -steps)?)
}

/// Self-critical objective `-mean((r_s - r_g) * log p(sample))`.
/// `logprob_sums (P,)` is differentiable; rewards are constants.
pub fn loss_scst(logprob_sums: &Tensor, sampled_rewards: &[f64], greedy_rewards: &[f64]) -> Result<Tensor> {
    let n = sampled_rewards.len();
    let adv: Vec<f64> = sampled_rewards.iter().zip(greedy_rewards).map(|(s, g)| s - g).collect();
    let adv = tensor(adv, &[n], logprob_sums.dtype(), logprob_sums.device())?;
    Ok(((logprob_sums * adv)?.sum_all()? / -(n as f64))?)
}

/// Differentiable per-layer terms.
#[derive(Debug, Clone)]
pub struct LayerTerms {
    pub coord: Tensor,
    pub size: Tensor,
    pub giou: Tensor,
    pub sem: Tensor,
    pub pos: Tensor,
}

impl LayerTerms {
    pub fn weighted(&self, beta: &[f64; 5]) -> Result<Tensor> {
        let t = [&self.coord, &self.size, &self.giou, &self.sem, &self.pos];
        let mut acc = (t[0] * beta[0])?;
        for i in 1..5 {
            acc = (acc + (t[i] * beta[i])?)?;
        }
        Ok(acc)
    }

    pub fn values(&self) -> Result<LayerLosses> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LayerLosses {
            coord: f(&self.coord)?,
            size: f(&self.size)?,
            giou: f(&self.giou)?,
            sem: f(&self.sem)?,
            pos: f(&self.pos)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLosses {
    pub coord: f64,
    pub size: f64,
    pub giou: f64,
    pub sem: f64,
    pub pos: f64,
}

impl LayerLosses {
    pub fn weighted(&self, beta: &[f64; 5]) -> f64 {
        beta[0] * self.coord + beta[1] * self.size + beta[2] * self.giou + beta[3] * self.sem + beta[4] * self.pos
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub layers: Vec<LayerLosses>,
    pub l_kps: f64,
    pub l_cap: f64,
    pub l_vg: f64,
    pub total: f64,
}

/// Combines per-layer losses with the captioning and KPS terms.
pub fn compose_total(layers: &[LayerLosses], l_cap: f64, l_kps: f64, w: &LossWeights) -> LossReport {
    let l_vg = if layers.is_empty() {
        0.0
    } else {
        layers.iter().map(|l| l.weighted(&w.beta)).sum::<f64>() / layers.len() as f64
    };
    LossReport {
        layers: layers.to_vec(),
        l_kps,
        l_cap,
        l_vg,
        total: w.alpha[0] * l_vg + w.alpha[1] * l_cap + w.alpha[2] * l_kps,
    }
}

/// Tensor counterpart of [`compose_total`]; `None` terms are left out.
pub fn compose_total_tensor(
    layers: &[LayerTerms],
    l_cap: Option<&Tensor>,
    l_kps: Option<&Tensor>,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut vg = layers[0].weighted(&w.beta)?;
    for l in &layers[1..] {
        vg = (vg + l.weighted(&w.beta)?)?;
    }
    let mut total = ((vg / layers.len() as f64)? * w.alpha[0])?;
    if let Some(c) = l_cap {
        total = (total + (c * w.alpha[1])?)?;
    }
    if let Some(k) = l_kps {
        total = (total + (k * w.alpha[2])?)?;
    }
    Ok(total)
}

/// Grounding losses of one forward pass.
#[derive(Debug, Clone)]
pub struct VgLoss {
    pub layers: Vec<LayerTerms>,
    pub kps: Tensor,
    /// Matching of the last decoder layer, per sample.
    pub last_matching: Vec<Matching>,
}

/// Matches every layer's predictions and builds all grounding terms.
/// `kps_y (B, n)` holds the KPS targets of each sample's scene.
pub fn vg_losses(fwd: &VgForward, targets: &[Vec<TargetObject>], kps_y: &Tensor) -> Result<VgLoss> {
    let mut layers = Vec::with_capacity(fwd.layers.len());
    let mut last_matching = Vec::new();
    for out in &fwd.layers {
        let (b, k, _) = out.boxes.dims3()?;
        let c = out.align.dim(2)?;
        let boxes: Vec<Vec<Vec<f64>>> = out.boxes.to_dtype(DType::F64)?.to_vec3()?;
        let align: Vec<Vec<Vec<f64>>> = out.align.to_dtype(DType::F64)?.to_vec3()?;
        let mut rows = Vec::new();
        let mut gt = Vec::new();
        let mut aligns = Vec::with_capacity(b);
        let mut matchings = Vec::with_capacity(b);
        for i in 0..b {
            let m = hungarian_match(&boxes[i], &align[i], &targets[i])?;
            for &(q, g) in &m.pairs {
                rows.push(i * k + q);
                gt.extend(targets[i][g].aabb.to_array());
            }
            aligns.push(SampleAlign::new(k, &m, &targets[i], c - 1));
            matchings.push(m);
        }
        let (dt, dev) = (out.boxes.dtype(), out.boxes.device());
        let zero = out.boxes.zeros_like()?.sum_all()?;
        let (coord, size, giou) = if rows.is_empty() {
            (zero.clone(), zero.clone(), zero.clone())
        } else {
            let pred = out.boxes.reshape((b * k, 6))?.index_select(&index_tensor(&rows, dev)?, 0)?;
            let gt = tensor(gt, &[rows.len(), 6], dt, dev)?;
            (loss_coord(&pred, &gt)?, loss_size(&pred, &gt)?, loss_giou(&pred, &gt)?)
        };
        layers.push(LayerTerms {
            coord,
            size,
            giou,
            sem: loss_sem(&out.align, &aligns, NO_OBJECT_WEIGHT)?,
            pos: loss_pos(&out.pos_align, &aligns)?,
        });
        last_matching = matchings;
    }
    let kps = loss_kps(&fwd.selection.logits, kps_y)?;
    Ok(VgLoss {
        layers,
        kps,
        last_matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn smooth_l1_branches() {
        let z = t(vec![0.0; 6], &[1, 6]);
        assert_eq!(s(&loss_coord(&z, &z).unwrap()), 0.0);
        let half = t(vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0], &[1, 6]);
        assert_relative_eq!(s(&loss_coord(&half, &z).unwrap()), 0.125);
        let three = t(vec![0.0, 0.0, 0.0, 3.0, -3.0, 3.0], &[1, 6]);
        assert_relative_eq!(s(&loss_size(&three, &z).unwrap()), 2.5);
    }

    #[test]
    fn giou_loss_fixtures() {
        let a = t(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[1, 6]);
        assert_relative_eq!(s(&loss_giou(&a, &a).unwrap()), 0.0, epsilon = 1e-12);
        let b = t(vec![0.5, 0.0, 0.0, 1.0, 1.0, 1.0], &[1, 6]);
        assert_relative_eq!(s(&loss_giou(&a, &b).unwrap()), 2.0 / 3.0, epsilon = 1e-12);
        let far = t(vec![5.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[1, 6]);
        assert!(s(&loss_giou(&a, &far).unwrap()) > 1.0);
    }

    fn one_query(span: Range<usize>, no_object: usize) -> Vec<SampleAlign> {
        vec![SampleAlign {
            query_span: vec![Some(span)],
            no_object,
        }]
    }

    #[test]
    fn sem_uniform_fixture() {
        let logits = t(vec![0.0; 8], &[1, 1, 8]);
        let q2t = loss_sem_q2t(&logits, &one_query(2..4, 7), 0.1).unwrap();
        assert_relative_eq!(s(&q2t), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn sem_vanishes_for_confident_logits() {
        let mut v = vec![-50.0; 8];
        v[2] = 50.0;
        v[3] = 50.0;
        let logits = t(v, &[1, 1, 8]);
        let q2t = s(&loss_sem_q2t(&logits, &one_query(2..4, 7), 0.1).unwrap());
        assert!(q2t < 1e-12);
        // the single query takes all token->query mass
        assert_relative_eq!(s(&loss_sem_t2q(&logits, &one_query(2..4, 7)).unwrap()), 0.0);
        let mut v = vec![-50.0; 8];
        v[2] = 50.0;
        let one = s(&loss_sem(&t(v, &[1, 1, 8]), &one_query(2..3, 7), 0.1).unwrap());
        assert!(one < 1e-12);
    }

    #[test]
    fn sem_ignores_pad_columns() {
        let a = t(vec![0.3, 1.0, -0.4, 0.2], &[1, 1, 4]);
        let b = t(vec![0.3, 1.0, -0.4, 0.2, MASK_NEG, MASK_NEG], &[1, 1, 6]);
        let la = s(&loss_sem(&a, &one_query(1..2, 3), 0.1).unwrap());
        let lb = s(&loss_sem(&b, &one_query(1..2, 3), 0.1).unwrap());
        assert_relative_eq!(la, lb, epsilon = 1e-12);
    }

    #[test]
    fn unmatched_queries_target_no_object() {
        let targets = vec![SampleAlign {
            query_span: vec![Some(0..1), None],
            no_object: 2,
        }];
        let logits = t(vec![0.0; 6], &[1, 2, 3]);
        // both rows have CE log 3; weights 1 and 0.1
        let q2t = s(&loss_sem_q2t(&logits, &targets, 0.1).unwrap());
        assert_relative_eq!(q2t, 3f64.ln(), epsilon = 1e-12);
        // column 0 over 2 queries, one positive
        assert_relative_eq!(s(&loss_sem_t2q(&logits, &targets).unwrap()), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pos_fixtures() {
        let logits = t(vec![0.0; 8], &[1, 1, 8]);
        assert_relative_eq!(s(&loss_pos(&logits, &one_query(2..4, 7)).unwrap()), 4f64.ln(), epsilon = 1e-12);
        let mut v = vec![-60.0; 8];
        v[2] = 60.0;
        v[3] = 60.0;
        assert!(s(&loss_pos(&t(v.clone(), &[1, 1, 8]), &one_query(2..4, 7)).unwrap()).abs() < 1e-12);
        v.extend([MASK_NEG; 3]);
        assert!(s(&loss_pos(&t(v, &[1, 1, 11]), &one_query(2..4, 7)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kps_fixtures() {
        let z = t(vec![0.0; 4], &[1, 4]);
        let y = t(vec![1.0, 0.0, 0.0, 1.0], &[1, 4]);
        assert_relative_eq!(s(&loss_kps(&z, &y).unwrap()), 2f64.ln(), epsilon = 1e-12);
        let sure = t(vec![40.0, -40.0, -40.0, 40.0], &[1, 4]);
        assert!(s(&loss_kps(&sure, &y).unwrap()) < 1e-12);
    }

    #[test]
    fn kps_target_rule() {
        let obj = Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        let tokens = [
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.2, 0.0, 0.0],
            [0.3, 0.0, 0.0],
            [0.4, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        assert_eq!(kps_targets(&tokens, &[obj]), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let empty = Aabb::new([9.0, 9.0, 9.0], [0.5, 0.5, 0.5]);
        assert_eq!(kps_targets(&tokens, &[empty]), vec![0.0; 6]);
        // tolerance admits the boundary
        assert_eq!(kps_targets(&[[0.505, 0.0, 0.0]], &[obj]), vec![1.0]);
    }

    #[test]
    fn cap_mle_uniform_and_pad() {
        let logits = t(vec![0.0; 2 * 4 * 64], &[2, 4, 64]);
        let seqs = vec![vec![1, 5, 6, 7, 2], vec![1, 9, 2]];
        assert_relative_eq!(s(&loss_cap_mle(&logits, &seqs).unwrap()), 64f64.ln(), epsilon = 1e-12);
        // changing logits at the pad steps of the short sequence changes nothing
        let mut v = vec![0.0; 2 * 4 * 64];
        for (i, x) in v[(4 + 2) * 64..].iter_mut().enumerate() {
            *x = (i % 13) as f64;
        }
        let l = s(&loss_cap_mle(&t(v, &[2, 4, 64]), &seqs).unwrap());
        assert_relative_eq!(l, 64f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cap_mle_confident_is_zero() {
        let seqs = vec![vec![1, 3, 2]];
        let mut v = vec![-40.0; 2 * 5];
        v[3] = 40.0;
        v[5 + 2] = 40.0;
        assert!(s(&loss_cap_mle(&t(v, &[1, 2, 5]), &seqs).unwrap()) < 1e-12);
    }

    #[test]
    fn scst_fixtures() {
        let lp = t(vec![-2.0, -3.0], &[2]);
        assert_eq!(s(&loss_scst(&lp, &[0.5, 0.7], &[0.5, 0.7]).unwrap()), 0.0);
        // -(0.4 * -2 + -0.2 * -3) / 2 = 0.1
        assert_relative_eq!(s(&loss_scst(&lp, &[0.9, 0.1], &[0.5, 0.3]).unwrap()), 0.1, epsilon = 1e-12);
        assert!(s(&loss_scst(&t(vec![-1.0], &[1]), &[1.0], &[0.0]).unwrap()) > 0.0);
    }

    #[test]
    fn weights_presets() {
        let w = LossWeights::scanrefer(6);
        assert_relative_eq!(w.alpha[0], 1.0 / 7.0);
        assert_eq!(w.beta, [5.0, 1.0, 1.0, 0.5, 0.5]);
        assert_eq!(LossWeights::nr3d(6).beta[3..], [1.0, 1.0]);
    }

    #[test]
    fn compose_by_hand() {
        let w = LossWeights::scanrefer(6);
        let unit = LayerLosses {
            coord: 1.0,
            size: 1.0,
            giou: 1.0,
            sem: 1.0,
            pos: 1.0,
        };
        let r = compose_total(&[unit; 6], 1.0, 1.0, &w);
        assert_relative_eq!(r.l_vg, 8.0);
        assert_relative_eq!(r.total, 8.0 / 7.0 + 5.0 + 8.0, epsilon = 1e-12);
        let z = compose_total(&[LayerLosses::default(); 3], 0.0, 0.0, &w);
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn compose_tensor_matches_hand() {
        let w = LossWeights::scanrefer(2);
        let c = |x: f64| t(vec![x], &[]);
        let layer = |k: f64| LayerTerms {
            coord: c(k),
            size: c(2.0 * k),
            giou: c(0.5),
            sem: c(0.2),
            pos: c(0.4),
        };
        let total = compose_total_tensor(&[layer(1.0), layer(3.0)], Some(&c(0.3)), Some(&c(0.6)), &w).unwrap();
        // layer sums: 5+2+0.5+0.1+0.2 = 7.8 and 15+6+0.5+0.1+0.2 = 21.8
        let by_hand = (7.8 + 21.8) / 2.0 / 3.0 + 5.0 * 0.3 + 8.0 * 0.6;
        assert_relative_eq!(s(&total), by_hand, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn compose_linear(c in prop::array::uniform5(0.0f64..3.0), cap in 0.0f64..3.0, kps in 0.0f64..3.0, which in 0usize..7) {
            let w = LossWeights::scanrefer(3);
            let l = LayerLosses { coord: c[0], size: c[1], giou: c[2], sem: c[3], pos: c[4] };
            let base = compose_total(&[l; 3], cap, kps, &w);
            let mut d = c;
            let (mut cap2, mut kps2) = (cap, kps);
            let coef = match which {
                5 => { cap2 *= 2.0; w.alpha[1] * cap }
                6 => { kps2 *= 2.0; w.alpha[2] * kps }
                i => { d[i] *= 2.0; w.alpha[0] * w.beta[i] * c[i] }
            };
            let l2 = LayerLosses { coord: d[0], size: d[1], giou: d[2], sem: d[3], pos: d[4] };
            let scaled = compose_total(&[l2; 3], cap2, kps2, &w);
            prop_assert!((scaled.total - base.total - coef).abs() < 1e-9);
        }

        #[test]
        fn losses_nonnegative(v in prop::collection::vec(-5.0f64..5.0, 16), g in prop::collection::vec(0.1f64..2.0, 6)) {
            let pred_v: Vec<f64> = v[..6].iter().enumerate().map(|(i, x)| if i < 3 { *x } else { x.abs() + 0.05 }).collect();
            let pred = t(pred_v, &[1, 6]);
            let gt = t(g.iter().enumerate().map(|(i, x)| if i < 3 { x - 1.0 } else { *x }).collect(), &[1, 6]);
            let giou = s(&loss_giou(&pred, &gt).unwrap());
            prop_assert!((0.0..=2.0).contains(&giou));
            prop_assert!(s(&loss_coord(&pred, &gt).unwrap()) >= 0.0);
            let logits = t(v[..8].to_vec(), &[1, 2, 4]);
            let targets = vec![SampleAlign { query_span: vec![Some(0..2), None], no_object: 3 }];
            prop_assert!(s(&loss_sem(&logits, &targets, 0.1).unwrap()) >= -1e-12);
            prop_assert!(s(&loss_pos(&logits, &targets).unwrap()) >= -1e-12);
            let y = t(v[8..].iter().map(|x| if *x > 0.0 { 1.0 } else { 0.0 }).collect(), &[1, 8]);
            prop_assert!(s(&loss_kps(&t(v[..8].to_vec(), &[1, 8]), &y).unwrap()) >= 0.0);
        }

        #[test]
        fn sem_invariant_to_non_span_permutation(v in prop::collection::vec(-3.0f64..3.0, 6), swap in 0usize..2) {
            // span is column 0, no-object column 5; permute columns 1..5
            let logits = t(v.clone(), &[1, 1, 6]);
            let mut p = v.clone();
            p.swap(1 + swap, 3 + swap);
            let targets = one_query(0..1, 5);
            let a = s(&loss_sem(&logits, &targets, 0.1).unwrap());
            let b = s(&loss_sem(&t(p, &[1, 1, 6]), &targets, 0.1).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

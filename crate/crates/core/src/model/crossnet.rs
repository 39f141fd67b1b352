//! Dual-pathway cross-encoder and keypoint (objectness) query selection.

use candle_core::{Tensor, D};

use super::nn::{index_tensor, Attention, Builder, LayerNorm, Linear, Mlp};
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct FusionBlock {
    v_self: Attention,
    t_self: Attention,
    v_cross: Attention,
    t_cross: Attention,
    v_ffn: Mlp,
    t_ffn: Mlp,
    norms: Vec<LayerNorm>,
}

impl FusionBlock {
    fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let (d, h, f) = (cfg.d, cfg.heads, cfg.ffn);
        Ok(Self {
            v_self: Attention::new(&vb.pp("v_self"), d, h)?,
            t_self: Attention::new(&vb.pp("t_self"), d, h)?,
            v_cross: Attention::new(&vb.pp("v_cross"), d, h)?,
            t_cross: Attention::new(&vb.pp("t_cross"), d, h)?,
            v_ffn: Mlp::new(&vb.pp("v_ffn"), d, f, d)?,
            t_ffn: Mlp::new(&vb.pp("t_ffn"), d, f, d)?,
            norms: (0..6)
                .map(|i| LayerNorm::new(&vb.pp(format!("norm{i}")), d))
                .collect::<Result<_>>()?,
        })
    }

    fn forward(&self, v: &Tensor, pos: &Tensor, t: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let vp = (v + pos)?;
        let v = self.norms[0].forward(&(v + self.v_self.forward(&vp, &vp, v, None, None)?)?)?;
        let t = self.norms[1].forward(&(t + self.t_self.forward(t, t, t, Some(mask), None)?)?)?;
        let vp = (&v + pos)?;
        let v2 = self.norms[2].forward(&(&v + self.v_cross.forward(&vp, &t, &t, Some(mask), None)?)?)?;
        let t2 = self.norms[3].forward(&(&t + self.t_cross.forward(&t, &vp, &v, None, None)?)?)?;
        let v = self.norms[4].forward(&(&v2 + self.v_ffn.forward(&v2)?)?)?;
        let t = self.norms[5].forward(&(&t2 + self.t_ffn.forward(&t2)?)?)?;
        Ok((v, t))
    }
}

/// `V (B, n, d)` and `T (B, l, d)` after fusion.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub v: Tensor,
    pub t: Tensor,
    /// Coordinate embedding of the visual tokens, carried for later attention.
    pub pos: Tensor,
}

#[derive(Debug, Clone)]
pub struct CrossEncoder {
    blocks: Vec<FusionBlock>,
}

impl CrossEncoder {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            blocks: (0..cfg.fusion_depth)
                .map(|i| FusionBlock::new(&vb.pp(format!("block{i}")), cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// `v0`, `pos`: `(B, n, d)`; `t0`: `(B, l, d)`; `mask`: `(B, l)`.
    pub fn forward(&self, v0: &Tensor, pos: &Tensor, t0: &Tensor, mask: &Tensor) -> Result<FusedFeatures> {
        let (bv, _, dv) = v0.dims3()?;
        let (bt, _, dt) = t0.dims3()?;
        if bv != bt || dv != dt {
            return Err(Error::DimensionMismatch(format!(
                "visual {:?} vs text {:?}",
                v0.dims(),
                t0.dims()
            )));
        }
        let (mut v, mut t) = (v0.clone(), t0.clone());
        for blk in &self.blocks {
            (v, t) = blk.forward(&v, pos, &t, mask)?;
        }
        Ok(FusedFeatures { v, t, pos: pos.clone() })
    }
}

/// Top-k indices by descending score, ties to the lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone)]
pub struct QuerySelection {
    /// Per sample, `k` indices into the visual tokens.
    pub indices: Vec<Vec<usize>>,
    /// `(B, k, d)`.
    pub q0: Tensor,
    /// `(B, n)` pre-sigmoid objectness.
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct KpsHead {
    head: Linear,
}

impl KpsHead {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            head: Linear::new(&vb.pp("head"), cfg.d, 1)?,
        })
    }

    pub fn logits(&self, v: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(v)?.squeeze(D::Minus1)?)
    }

    pub fn select(&self, v: &Tensor, k: usize) -> Result<QuerySelection> {
        let (b, n, d) = v.dims3()?;
        if k > n {
            return Err(Error::TooManySamples {
                requested: k,
                available: n,
            });
        }
        let logits = self.logits(v)?;
        let host: Vec<Vec<f64>> = logits.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        let indices: Vec<Vec<usize>> = host.iter().map(|row| top_k(row, k)).collect();
        let flat: Vec<usize> = indices
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| i * n + j))
            .collect();
        let idx = index_tensor(&flat, v.device())?;
        let q0 = v.reshape((b * n, d))?.index_select(&idx, 0)?.reshape((b, k, d))?;
        Ok(QuerySelection { indices, q0, logits })
    }
}

/// Gathers rows `indices[b]` of `(B, n, c)` into `(B, k, c)`.
pub fn gather_rows(x: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    let k = indices.first().map_or(0, |r| r.len());
    let flat: Vec<usize> = indices
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&j| i * n + j))
        .collect();
    let idx = index_tensor(&flat, x.device())?;
    Ok(x.reshape((b * n, c))?.index_select(&idx, 0)?.reshape((b, k, c))?)
}

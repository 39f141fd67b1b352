//! Point-cloud set abstraction with the visual-token query, and the text encoder.

use candle_core::{Device, Tensor};

use super::nn::{index_tensor, sinusoidal_table, tensor, Attention, Builder, Init, LayerNorm, Linear, Mlp};
use super::ModelConfig;
use crate::datagen::PointCloud;
use crate::error::{Error, Result};
use crate::metrics::Aabb;
use crate::pointops::{ball_query, fps, NeighborGroup, Point};

/// Index plans and constant inputs of one scene. Geometry never changes
/// during training, so this is computed once per scene.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub extent: Aabb,
    /// `n1 * k1 * 6`: neighbor offsets scaled by the radius, then centered rgb.
    pub sa1_input: Vec<f64>,
    pub sa1_xyz: Vec<Point>,
    /// `n2 * k2 * 3` scaled offsets of SA2 neighbors.
    pub sa2_rel: Vec<f64>,
    pub sa2_group: NeighborGroup,
    /// `V'` coordinates.
    pub sa2_xyz: Vec<Point>,
    /// Visual token coordinates `C`.
    pub token_xyz: Vec<Point>,
    /// Ball-query groups of tokens into `V'`.
    pub token_group: NeighborGroup,
}

impl SceneGeometry {
    pub fn prepare(cloud: &PointCloud, extent: Aabb, cfg: &ModelConfig) -> Result<Self> {
        let n_points = cloud.points.len();
        let n1 = n_points / cfg.sa1_stride;
        let n2 = n_points / cfg.sa2_stride;
        if n1 < cfg.num_tokens.max(n2) || n2 == 0 {
            return Err(Error::config(format!(
                "{n_points} points are too few for {} tokens",
                cfg.num_tokens
            )));
        }
        let xyz = cloud.xyz();
        // greedy FPS with a fixed start: shorter runs are prefixes of longer ones
        let order = fps(&xyz, n1, 0)?;
        let sa1_xyz: Vec<Point> = order.iter().map(|&i| xyz[i]).collect();
        let token_xyz: Vec<Point> = sa1_xyz[..cfg.num_tokens].to_vec();

        let g1 = ball_query(&sa1_xyz, &xyz, cfg.sa1_k, cfg.sa1_radius);
        let mut sa1_input = Vec::with_capacity(n1 * cfg.sa1_k * 6);
        for (i, c) in sa1_xyz.iter().enumerate() {
            for &j in g1.row(i) {
                let p = &cloud.points[j];
                for a in 0..3 {
                    sa1_input.push((p[a] - c[a]) / cfg.sa1_radius);
                }
                for a in 3..6 {
                    sa1_input.push(p[a] - 0.5);
                }
            }
        }

        let sa2_order = fps(&sa1_xyz, n2, 0)?;
        let sa2_xyz: Vec<Point> = sa2_order.iter().map(|&i| sa1_xyz[i]).collect();
        let sa2_group = ball_query(&sa2_xyz, &sa1_xyz, cfg.sa2_k, cfg.sa2_radius);
        let mut sa2_rel = Vec::with_capacity(n2 * cfg.sa2_k * 3);
        for (i, c) in sa2_xyz.iter().enumerate() {
            for &j in sa2_group.row(i) {
                for a in 0..3 {
                    sa2_rel.push((sa1_xyz[j][a] - c[a]) / cfg.sa2_radius);
                }
            }
        }
        let token_group = ball_query(&token_xyz, &sa2_xyz, cfg.token_k, cfg.token_radius);
        Ok(Self {
            extent,
            sa1_input,
            sa1_xyz,
            sa2_rel,
            sa2_group,
            sa2_xyz,
            token_xyz,
            token_group,
        })
    }

    /// Token coordinates mapped into [0, 1] by the room extent.
    pub fn normalized_tokens(&self) -> Vec<f64> {
        let lo = self.extent.min();
        self.token_xyz
            .iter()
            .flat_map(|p| (0..3).map(move |a| (p[a] - lo[a]) / self.extent.size[a]))
            .collect()
    }
}

/// Per-channel max over the middle axis of `(rows, k, c)`, routed through
/// argmax + gather so each pooled value has exactly one gradient path.
pub fn pool_groups(x: &Tensor) -> Result<Tensor> {
    let idx = x.argmax_keepdim(1)?;
    Ok(x.gather(&idx, 1)?.squeeze(1)?)
}

fn offset_indices(groups: &[&NeighborGroup], stride: usize) -> Vec<usize> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(s, g)| g.indices.iter().map(move |&i| i + s * stride))
        .collect()
}

/// Visual tokens for a batch of scenes.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    /// `(S, n, d)`.
    pub features: Tensor,
    /// `(S, n, d)` learned embedding of the token coordinates.
    pub pos: Tensor,
}

#[derive(Debug, Clone)]
pub struct PointEncoder {
    sa1: Mlp,
    sa2: Mlp,
    out: Linear,
    pos: Mlp,
}

impl PointEncoder {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            sa1: Mlp::new(&vb.pp("sa1"), 6, cfg.sa1_width, cfg.sa1_width)?,
            sa2: Mlp::new(&vb.pp("sa2"), 3 + cfg.sa1_width, cfg.sa2_width, cfg.sa2_width)?,
            out: Linear::new(&vb.pp("out"), cfg.sa2_width, cfg.d)?,
            pos: Mlp::new(&vb.pp("pos"), 3, cfg.d, cfg.d)?,
        })
    }

    /// Two set-abstraction stages: returns `V'` features `(S * n2, d_mid)`.
    pub fn encode_points(&self, scenes: &[&SceneGeometry]) -> Result<Tensor> {
        let dev = self.out.weight().device().clone();
        let dtype = self.out.weight().dtype();
        let s = scenes.len();
        let n1 = scenes[0].sa1_xyz.len();
        let k1 = scenes[0].sa1_input.len() / (n1 * 6);
        let input: Vec<f64> = scenes.iter().flat_map(|g| g.sa1_input.iter().copied()).collect();
        let x = tensor(input, &[s * n1 * k1, 6], dtype, &dev)?;
        let f1 = self.sa1.forward(&x)?.relu()?;
        let c1 = f1.dim(1)?;
        let f1 = pool_groups(&f1.reshape((s * n1, k1, c1))?)?;

        let n2 = scenes[0].sa2_xyz.len();
        let k2 = scenes[0].sa2_group.k;
        let groups: Vec<&NeighborGroup> = scenes.iter().map(|g| &g.sa2_group).collect();
        let idx = index_tensor(&offset_indices(&groups, n1), &dev)?;
        let rel: Vec<f64> = scenes.iter().flat_map(|g| g.sa2_rel.iter().copied()).collect();
        let rel = tensor(rel, &[s * n2 * k2, 3], dtype, &dev)?;
        let x2 = Tensor::cat(&[&rel, &f1.index_select(&idx, 0)?], 1)?;
        let f2 = self.sa2.forward(&x2)?.relu()?;
        let c2 = f2.dim(1)?;
        pool_groups(&f2.reshape((s * n2, k2, c2))?)
    }

    /// `V0 = MaxPool(BallQuery(V', C))` projected to the model width, plus the
    /// coordinate embedding of `C`.
    pub fn forward(&self, scenes: &[&SceneGeometry]) -> Result<VisualTokens> {
        let dev = self.out.weight().device().clone();
        let dtype = self.out.weight().dtype();
        let s = scenes.len();
        let v_prime = self.encode_points(scenes)?;
        let n2 = scenes[0].sa2_xyz.len();
        let n = scenes[0].token_xyz.len();
        let kq = scenes[0].token_group.k;
        let groups: Vec<&NeighborGroup> = scenes.iter().map(|g| &g.token_group).collect();
        let idx = index_tensor(&offset_indices(&groups, n2), &dev)?;
        let c = v_prime.dim(1)?;
        let v0 = pool_groups(&v_prime.index_select(&idx, 0)?.reshape((s * n, kq, c))?)?;
        let features = self.out.forward(&v0.reshape((s, n, c))?)?;
        let coords: Vec<f64> = scenes.iter().flat_map(|g| g.normalized_tokens()).collect();
        let coords = tensor(coords, &[s, n, 3], dtype, &dev)?;
        Ok(VisualTokens {
            features,
            pos: self.pos.forward(&coords)?,
        })
    }
}

/// Padded id batch with its validity mask.
#[derive(Debug, Clone)]
pub struct TextBatch {
    /// `(B, l)` u32.
    pub ids: Tensor,
    /// `(B, l)` 1 for real tokens, 0 for padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn new(seqs: &[&[u32]], pad_to: usize, cfg_dtype: candle_core::DType, dev: &Device) -> Result<Self> {
        let l = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(pad_to);
        let mut ids = Vec::with_capacity(seqs.len() * l);
        let mut mask = Vec::with_capacity(seqs.len() * l);
        for s in seqs {
            for i in 0..l {
                ids.push(s.get(i).copied().unwrap_or(crate::vocab::PAD));
                mask.push(if i < s.len() { 1.0 } else { 0.0 });
            }
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (seqs.len(), l), dev)?,
            mask: tensor(mask, &[seqs.len(), l], cfg_dtype, dev)?,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.dim(1).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    attn: Attention,
    n1: LayerNorm,
    ffn: Mlp,
    n2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(vb: &Builder, d: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(&vb.pp("attn"), d, heads)?,
            n1: LayerNorm::new(&vb.pp("norm1"), d)?,
            ffn: Mlp::new(&vb.pp("ffn"), d, ffn, d)?,
            n2: LayerNorm::new(&vb.pp("norm2"), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = self.n1.forward(&(x + self.attn.forward(x, x, x, Some(mask), None)?)?)?;
        self.n2.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: Tensor,
    blocks: Vec<EncoderBlock>,
    d: usize,
}

impl TextEncoder {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.text_layers)
            .map(|i| EncoderBlock::new(&vb.pp(format!("block{i}")), cfg.d, cfg.heads, cfg.ffn))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed: vb.param("embed", &[cfg.vocab_size, cfg.d], Init::Normal(0.5))?,
            blocks,
            d: cfg.d,
        })
    }

    /// `T0 (B, l, d)`.
    pub fn forward(&self, batch: &TextBatch) -> Result<Tensor> {
        let (b, l) = batch.ids.dims2()?;
        let x = self.embed.index_select(&batch.ids.flatten_all()?, 0)?.reshape((b, l, self.d))?;
        let pe = tensor(sinusoidal_table(l, self.d), &[1, l, self.d], x.dtype(), x.device())?;
        let mut x = x.broadcast_add(&pe)?;
        for blk in &self.blocks {
            x = blk.forward(&x, &batch.mask)?;
        }
        Ok(x)
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embed
    }
}

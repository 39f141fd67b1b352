//! The grounding + captioning network and its configuration.

pub mod backbone;
pub mod captioner;
pub mod crossnet;
pub mod decoder;
pub mod nn;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{PointEncoder, SceneGeometry, TextBatch, TextEncoder, VisualTokens};
pub use captioner::{CaptionBatch, Captioner};
pub use crossnet::{gather_rows, top_k, CrossEncoder, FusedFeatures, KpsHead, QuerySelection};
pub use decoder::{initial_boxes, referring_scores, DecoderContext, DecoderLayerOutput, ObjectDecoder};
pub use nn::{Builder, ParamStore};

use crate::error::{Error, Result};

/// Name prefix of every caption-head parameter.
pub const CAPTIONER_PREFIX: &str = "captioner.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Points rendered per scene.
    pub num_points: usize,
    pub sa1_stride: usize,
    pub sa1_radius: f64,
    pub sa1_k: usize,
    pub sa1_width: usize,
    pub sa2_stride: usize,
    pub sa2_radius: f64,
    pub sa2_k: usize,
    /// Width of `V'`.
    pub sa2_width: usize,
    /// Visual tokens `n`.
    pub num_tokens: usize,
    pub token_k: usize,
    pub token_radius: f64,
    pub text_layers: usize,
    pub fusion_depth: usize,
    /// Object queries `k`.
    pub num_queries: usize,
    pub decoder_layers: usize,
    /// Decoder layers also cross-attend the fused visual tokens.
    pub decoder_visual_attention: bool,
    pub init_box_size: f64,
    pub caption_blocks: usize,
    pub caption_max_len: usize,
}

impl ModelConfig {
    /// Laptop-scale defaults.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 64,
            heads: 4,
            ffn: 128,
            vocab_size,
            num_points: 1024,
            sa1_stride: 4,
            sa1_radius: 0.2,
            sa1_k: 16,
            sa1_width: 32,
            sa2_stride: 8,
            sa2_radius: 0.4,
            sa2_k: 16,
            sa2_width: 64,
            num_tokens: 64,
            token_k: 8,
            token_radius: 0.3,
            text_layers: 2,
            fusion_depth: 2,
            num_queries: 32,
            decoder_layers: 2,
            decoder_visual_attention: true,
            init_box_size: 0.2,
            caption_blocks: 2,
            caption_max_len: 32,
        }
    }

    /// Minimal model for gradient checks and fast unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d: 16,
            heads: 2,
            ffn: 32,
            num_points: 256,
            sa1_width: 8,
            sa2_width: 16,
            sa1_k: 8,
            sa2_k: 8,
            num_tokens: 32,
            token_k: 4,
            sa1_radius: 0.4,
            sa2_radius: 0.8,
            token_radius: 0.6,
            text_layers: 1,
            fusion_depth: 1,
            num_queries: 4,
            decoder_layers: 2,
            caption_blocks: 2,
            ..Self::desk(vocab_size)
        }
    }

    /// Full scale (far beyond a CPU budget).
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d: 288,
            heads: 8,
            ffn: 512,
            num_points: 50_000,
            num_tokens: 1024,
            num_queries: 256,
            decoder_layers: 6,
            fusion_depth: 3,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1");
        }
        if self.num_queries == 0 || self.num_queries > self.num_tokens {
            return bad("num_queries must be in 1..=num_tokens");
        }
        if self.num_points / self.sa1_stride < self.num_tokens {
            return bad("num_points / sa1_stride must cover num_tokens");
        }
        if self.caption_max_len < 2 {
            return bad("caption_max_len must be at least 2");
        }
        Ok(())
    }
}

/// Forward products of the grounding path for one batch of texts.
#[derive(Debug, Clone)]
pub struct VgForward {
    pub fused: FusedFeatures,
    pub selection: QuerySelection,
    pub layers: Vec<DecoderLayerOutput>,
    /// `(B, l)` text mask (without the no-object slot).
    pub mask: Tensor,
}

impl VgForward {
    pub fn last(&self) -> &DecoderLayerOutput {
        self.layers.last().expect("at least one decoder layer")
    }
}

pub struct GroundCap {
    pub cfg: ModelConfig,
    pub points: PointEncoder,
    pub text: TextEncoder,
    pub cross: CrossEncoder,
    pub kps: KpsHead,
    pub decoder: ObjectDecoder,
    pub captioner: Captioner,
    pub params: ParamStore,
}

impl GroundCap {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let vb = Builder::new(seed, dtype, Device::Cpu);
        let points = PointEncoder::new(&vb.pp("backbone.points"), cfg)?;
        let text = TextEncoder::new(&vb.pp("backbone.text"), cfg)?;
        let cross = CrossEncoder::new(&vb.pp("crossnet"), cfg)?;
        let kps = KpsHead::new(&vb.pp("kps"), cfg)?;
        let decoder = ObjectDecoder::new(&vb.pp("decoder"), cfg)?;
        let captioner = Captioner::new(&vb.pp(CAPTIONER_PREFIX.trim_end_matches('.')), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            points,
            text,
            cross,
            kps,
            decoder,
            captioner,
            params: vb.finish(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Grounding path. `scene_of[i]` picks the geometry of text `i`.
    pub fn forward_vg(&self, scenes: &[&SceneGeometry], texts: &[&[u32]], scene_of: &[usize]) -> Result<VgForward> {
        let dev = self.device().clone();
        let dtype = self.dtype();
        let visual = self.points.forward(scenes)?;
        let batch = TextBatch::new(texts, 0, dtype, &dev)?;
        let t0 = self.text.forward(&batch)?;
        let idx = nn::index_tensor(scene_of, &dev)?;
        let v0 = visual.features.index_select(&idx, 0)?;
        let pos = visual.pos.index_select(&idx, 0)?;
        let fused = self.cross.forward(&v0, &pos, &t0, &batch.mask)?;
        let selection = self.kps.select(&fused.v, self.cfg.num_queries)?;
        let token_xyz: Vec<&[[f64; 3]]> = scene_of.iter().map(|&s| scenes[s].token_xyz.as_slice()).collect();
        let boxes0 = initial_boxes(&token_xyz, &selection.indices, self.cfg.init_box_size, dtype, &dev)?;
        let mut off = Vec::with_capacity(scene_of.len() * 6);
        let mut scale = Vec::with_capacity(scene_of.len() * 6);
        for &s in scene_of {
            let e = &scenes[s].extent;
            let lo = e.min();
            off.extend_from_slice(&[lo[0], lo[1], lo[2], 0.0, 0.0, 0.0]);
            scale.extend_from_slice(&[e.size[0], e.size[1], e.size[2], e.size[0], e.size[1], e.size[2]]);
        }
        let b = scene_of.len();
        let off = nn::tensor(off, &[b, 1, 6], dtype, &dev)?;
        let scale = nn::tensor(scale, &[b, 1, 6], dtype, &dev)?;
        let ctx = DecoderContext {
            t: &fused.t,
            mask: &batch.mask,
            visual: if self.cfg.decoder_visual_attention {
                Some((&fused.v, &fused.pos))
            } else {
                None
            },
            box_offset: &off,
            box_scale: &scale,
        };
        let layers = self.decoder.forward(&selection.q0, &boxes0, &ctx)?;
        Ok(VgForward {
            fused,
            selection,
            layers,
            mask: batch.mask,
        })
    }

    /// Caption context for chosen `(sample, query)` pairs: `(q (P, d), V (P, n, d))`.
    pub fn caption_inputs(&self, fwd: &VgForward, pairs: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let q = fwd.last().q.clone();
        let (b, k, d) = q.dims3()?;
        let flat: Vec<usize> = pairs.iter().map(|&(s, j)| s * k + j).collect();
        let qi = q.reshape((b * k, d))?.index_select(&nn::index_tensor(&flat, q.device())?, 0)?;
        let samples: Vec<usize> = pairs.iter().map(|&(s, _)| s).collect();
        let v = fwd.fused.v.index_select(&nn::index_tensor(&samples, q.device())?, 0)?;
        Ok((qi, v))
    }

    /// Parameters whose name does (`true`) or does not start with the caption prefix.
    pub fn param_names(&self, captioner: bool) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(CAPTIONER_PREFIX) == captioner)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

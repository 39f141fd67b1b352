//! Object decoder: query refinement with box-derived position embeddings,
//! dynamic box updates, and the text-alignment branch.

use candle_core::{Tensor, D};

use super::nn::{fourier_features, softmax_last, tensor, Attention, Builder, Init, LayerNorm, Linear, Mlp, MASK_NEG};
use super::ModelConfig;
use crate::error::{Error, Result};

/// Maximum center move per layer, meters.
pub const MAX_CENTER_STEP: f64 = 1.0;
/// Bound on the log-size delta per layer.
pub const MAX_LOG_SIZE_STEP: f64 = 2.0;
const BOX_FREQS: usize = 4;

#[derive(Debug, Clone)]
pub struct DecoderLayerOutput {
    /// `(B, k, d)`.
    pub q: Tensor,
    /// `(B, k, 6)` center then size, meters.
    pub boxes: Tensor,
    /// `(B, k, l + 1)` content-pathway logits against `T'` (text + no-object slot).
    pub align: Tensor,
    /// `(B, k, l + 1)` position-pathway logits against `T'`.
    pub pos_align: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    text_attn: Attention,
    visual_attn: Option<Attention>,
    ffn: Mlp,
    norms: Vec<LayerNorm>,
}

impl DecoderLayer {
    fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let (d, h) = (cfg.d, cfg.heads);
        Ok(Self {
            self_attn: Attention::new(&vb.pp("self"), d, h)?,
            text_attn: Attention::new(&vb.pp("text"), d, h)?,
            visual_attn: if cfg.decoder_visual_attention {
                Some(Attention::new(&vb.pp("visual"), d, h)?)
            } else {
                None
            },
            ffn: Mlp::new(&vb.pp("ffn"), d, cfg.ffn, d)?,
            norms: (0..4)
                .map(|i| LayerNorm::new(&vb.pp(format!("norm{i}")), d))
                .collect::<Result<_>>()?,
        })
    }

    fn forward(&self, q: &Tensor, pe: &Tensor, ctx: &DecoderContext) -> Result<Tensor> {
        let qp = (q + pe)?;
        let q = self.norms[0].forward(&(q + self.self_attn.forward(&qp, &qp, q, None, None)?)?)?;
        let qp = (&q + pe)?;
        let q = self.norms[1].forward(&(&q + self.text_attn.forward(&qp, ctx.t, ctx.t, Some(ctx.mask), None)?)?)?;
        let q = match (&self.visual_attn, ctx.visual) {
            (Some(att), Some((v, vpos))) => {
                let qp = (&q + pe)?;
                let keys = (v + vpos)?;
                self.norms[2].forward(&(&q + att.forward(&qp, &keys, v, None, None)?)?)?
            }
            _ => q,
        };
        self.norms[3].forward(&(&q + self.ffn.forward(&q)?)?)
    }
}

/// Everything the decoder attends to.
pub struct DecoderContext<'a> {
    /// `(B, l, d)` fused text.
    pub t: &'a Tensor,
    /// `(B, l)` validity mask.
    pub mask: &'a Tensor,
    /// Fused visual tokens and their coordinate embedding, `(B, n, d)` each.
    pub visual: Option<(&'a Tensor, &'a Tensor)>,
    /// `(B, 1, 6)` subtracted from boxes before the position embedding.
    pub box_offset: &'a Tensor,
    /// `(B, 1, 6)` divisor mapping boxes into the unit room.
    pub box_scale: &'a Tensor,
}

/// Box regression head applied after every layer.
#[derive(Debug, Clone)]
pub struct BoxHead {
    mlp: Mlp,
}

impl BoxHead {
    pub fn new(vb: &Builder, d: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(vb, d, d, 6)?,
        })
    }

    /// Center += tanh-bounded offset; size *= exp(clamped delta).
    pub fn update(&self, q: &Tensor, prev: &Tensor) -> Result<Tensor> {
        let raw = self.mlp.forward(q)?;
        let offset = (raw.narrow(D::Minus1, 0, 3)?.tanh()? * MAX_CENTER_STEP)?;
        let delta = raw
            .narrow(D::Minus1, 3, 3)?
            .clamp(-MAX_LOG_SIZE_STEP, MAX_LOG_SIZE_STEP)?;
        let center = (prev.narrow(D::Minus1, 0, 3)? + offset)?;
        let size = (prev.narrow(D::Minus1, 3, 3)? * delta.exp()?)?;
        Ok(Tensor::cat(&[center, size], D::Minus1)?)
    }

    /// Makes the head output exactly zero, i.e. the identity update.
    pub fn zero(&mut self) -> Result<()> {
        self.mlp.last_mut().zero_out()
    }
}

/// Scaled dot product between projected queries and projected text rows.
#[derive(Debug, Clone)]
pub struct AlignHead {
    pq: Linear,
    pt: Linear,
    scale: f64,
}

impl AlignHead {
    pub fn new(vb: &Builder, d: usize) -> Result<Self> {
        Ok(Self {
            pq: Linear::new(&vb.pp("q"), d, d)?,
            pt: Linear::new(&vb.pp("t"), d, d)?,
            scale: 1.0 / (d as f64).sqrt(),
        })
    }

    /// `q (B, k, d)`, `t (B, c, d)`, `mask (B, c)` -> `(B, k, c)` with
    /// masked columns pushed to an effectively infinite negative value.
    pub fn logits(&self, q: &Tensor, t: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let a = self.pq.forward(q)?;
        let b = self.pt.forward(t)?;
        let logits = (a.matmul(&b.transpose(1, 2)?.contiguous()?)? * self.scale)?;
        let bias = ((mask - 1.0)? * -MASK_NEG)?.unsqueeze(1)?;
        Ok(logits.broadcast_add(&bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct ObjectDecoder {
    layers: Vec<DecoderLayer>,
    box_pe: Mlp,
    pub box_head: BoxHead,
    align: AlignHead,
    pos_align: AlignHead,
    no_object: Tensor,
}

impl ObjectDecoder {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        Ok(Self {
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(&vb.pp(format!("layer{i}")), cfg))
                .collect::<Result<_>>()?,
            box_pe: Mlp::new(&vb.pp("box_pe"), 6 * 2 * BOX_FREQS, cfg.d, cfg.d)?,
            box_head: BoxHead::new(&vb.pp("box_head"), cfg.d)?,
            align: AlignHead::new(&vb.pp("align"), cfg.d)?,
            pos_align: AlignHead::new(&vb.pp("pos_align"), cfg.d)?,
            no_object: vb.param("no_object", &[1, 1, cfg.d], Init::Normal(0.5))?,
        })
    }

    pub fn box_embedding(&self, boxes: &Tensor, ctx: &DecoderContext) -> Result<Tensor> {
        let unit = boxes.broadcast_sub(ctx.box_offset)?.broadcast_div(ctx.box_scale)?;
        self.box_pe.forward(&fourier_features(&unit, BOX_FREQS)?)
    }

    /// `T' = T ++ [no-object]` and its mask.
    pub fn extended_text(&self, ctx: &DecoderContext) -> Result<(Tensor, Tensor)> {
        let (b, _, d) = ctx.t.dims3()?;
        let slot = self.no_object.broadcast_as((b, 1, d))?;
        let t = Tensor::cat(&[ctx.t, &slot], 1)?;
        let ones = Tensor::ones((b, 1), ctx.mask.dtype(), ctx.mask.device())?;
        let mask = Tensor::cat(&[ctx.mask, &ones], 1)?;
        Ok((t, mask))
    }

    /// Runs every layer and returns all of their outputs.
    pub fn forward(&self, q0: &Tensor, boxes0: &Tensor, ctx: &DecoderContext) -> Result<Vec<DecoderLayerOutput>> {
        let (t_ext, mask_ext) = self.extended_text(ctx)?;
        let mut q = q0.clone();
        let mut boxes = boxes0.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pe = self.box_embedding(&boxes, ctx)?;
            q = layer.forward(&q, &pe, ctx)?;
            boxes = self.box_head.update(&q, &boxes)?;
            let align = self.align.logits(&q, &t_ext, &mask_ext)?;
            let pe_out = self.box_embedding(&boxes, ctx)?;
            let pos_align = self.pos_align.logits(&pe_out, &t_ext, &mask_ext)?;
            outs.push(DecoderLayerOutput {
                q: q.clone(),
                boxes: boxes.clone(),
                align,
                pos_align,
            });
        }
        Ok(outs)
    }
}

/// Initial boxes: selected token centers with a fixed cube size.
pub fn initial_boxes(
    token_xyz: &[&[[f64; 3]]],
    indices: &[Vec<usize>],
    size: f64,
    dtype: candle_core::DType,
    dev: &candle_core::Device,
) -> Result<Tensor> {
    let k = indices.first().map_or(0, |r| r.len());
    let mut v = Vec::with_capacity(indices.len() * k * 6);
    for (xyz, row) in token_xyz.iter().zip(indices) {
        for &i in row {
            v.extend_from_slice(&xyz[i]);
            v.extend_from_slice(&[size; 3]);
        }
    }
    tensor(v, &[indices.len(), k, 6], dtype, dev)
}

/// Softmax mass each query puts on the span columns: `(k, c)` logits row-major.
pub fn referring_scores(logits: &[Vec<f64>], span: std::ops::Range<usize>) -> Result<Vec<f64>> {
    if span.is_empty() {
        return Err(Error::EmptySpan);
    }
    Ok(logits
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e[span.clone()].iter().sum::<f64>() / z
        })
        .collect())
}

/// Tensor form of [`referring_scores`] for a batch: `(B, k, c)` -> `(B, k)`.
pub fn referring_scores_tensor(logits: &Tensor, span_mask: &Tensor) -> Result<Tensor> {
    let p = softmax_last(logits)?;
    Ok(p.broadcast_mul(&span_mask.unsqueeze(1)?)?.sum(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    struct Fixture {
        t: Tensor,
        mask: Tensor,
        off: Tensor,
        scale: Tensor,
    }

    fn fixture(d: usize) -> Fixture {
        let dev = Device::Cpu;
        Fixture {
            t: rand(&[1, 5, d], 2),
            mask: Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0, 0.0]], &dev).unwrap(),
            off: Tensor::new(&[[[-3.0f64, -3.0, 0.0, 0.0, 0.0, 0.0]]], &dev).unwrap(),
            scale: Tensor::new(&[[[6.0f64, 6.0, 3.0, 6.0, 6.0, 3.0]]], &dev).unwrap(),
        }
    }

    fn ctx(f: &Fixture) -> DecoderContext<'_> {
        DecoderContext {
            t: &f.t,
            mask: &f.mask,
            visual: None,
            box_offset: &f.off,
            box_scale: &f.scale,
        }
    }

    #[test]
    fn returns_one_output_per_layer() {
        for layers in [1, 3] {
            let cfg = ModelConfig {
                decoder_layers: layers,
                ..ModelConfig::tiny(47)
            };
            let vb = Builder::new(0, DType::F64, Device::Cpu);
            let dec = ObjectDecoder::new(&vb, &cfg).unwrap();
            let f = fixture(cfg.d);
            let q0 = rand(&[1, 4, cfg.d], 1);
            let b0 = rand(&[1, 4, 6], 3).abs().unwrap();
            let outs = dec.forward(&q0, &b0, &ctx(&f)).unwrap();
            assert_eq!(outs.len(), layers);
            assert_eq!(outs[0].align.dims(), &[1, 4, 6]);
            assert_eq!(outs[0].boxes.dims(), &[1, 4, 6]);
        }
    }

    #[test]
    fn zero_box_head_freezes_boxes() {
        let cfg = ModelConfig::tiny(47);
        let vb = Builder::new(0, DType::F64, Device::Cpu);
        let mut dec = ObjectDecoder::new(&vb, &cfg).unwrap();
        dec.box_head.zero().unwrap();
        let f = fixture(cfg.d);
        let b0 = rand(&[1, 4, 6], 3).abs().unwrap();
        let outs = dec.forward(&rand(&[1, 4, cfg.d], 1), &b0, &ctx(&f)).unwrap();
        for o in outs {
            assert_eq!(o.boxes.to_vec3::<f64>().unwrap(), b0.to_vec3::<f64>().unwrap());
        }
    }

    #[test]
    fn clamped_size_delta_multiplies_by_e_squared() {
        let cfg = ModelConfig::tiny(47);
        let vb = Builder::new(0, DType::F64, Device::Cpu);
        let head = BoxHead::new(&vb, cfg.d).unwrap();
        // drive raw outputs far beyond the clamp with a huge query
        let q = (Tensor::ones((1, 1, cfg.d), DType::F64, &Device::Cpu).unwrap() * 1e6).unwrap();
        let prev = Tensor::new(&[[[0.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]]], &Device::Cpu).unwrap();
        let out = head.update(&q, &prev).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for v in &out[3..] {
            let e2 = 2f64.exp();
            assert!((v - e2).abs() < 1e-9 || (v - 1.0 / e2).abs() < 1e-9, "{v}");
            assert!(*v > 0.0);
        }
        for c in &out[..3] {
            assert!(c.abs() <= MAX_CENTER_STEP);
        }
    }

    #[test]
    fn align_logits_match_explicit_dot_products() {
        let d = 4;
        let vb = Builder::new(5, DType::F64, Device::Cpu);
        let head = AlignHead::new(&vb, d).unwrap();
        let store = vb.finish();
        let q = rand(&[1, 2, d], 1);
        let t = rand(&[1, 3, d], 2);
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let got = head.logits(&q, &t, &mask).unwrap().to_vec3::<f64>().unwrap();

        let w = |n: &str| store.get(n).unwrap().as_tensor().to_vec2::<f64>().unwrap();
        let b = |n: &str| store.get(n).unwrap().as_tensor().to_vec1::<f64>().unwrap();
        let proj = |x: &[f64], wn: &str, bn: &str| -> Vec<f64> {
            let (w, b) = (w(wn), b(bn));
            (0..d).map(|j| b[j] + (0..d).map(|i| x[i] * w[i][j]).sum::<f64>()).collect()
        };
        let qv = q.to_vec3::<f64>().unwrap();
        let tv = t.to_vec3::<f64>().unwrap();
        for i in 0..2 {
            let a = proj(&qv[0][i], "q.weight", "q.bias");
            for j in 0..2 {
                let c = proj(&tv[0][j], "t.weight", "t.bias");
                let dot: f64 = a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt();
                assert!((got[0][i][j] - dot).abs() < 1e-12);
            }
            assert!(got[0][i][2] < -1e8);
        }
    }

    #[test]
    fn referring_score_properties() {
        let logits = vec![vec![0.3, -1.0, 2.0, 0.1], vec![5.0, 5.0, 5.0, 5.0]];
        let full = referring_scores(&logits, 0..4).unwrap();
        assert!(full.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let s = referring_scores(&logits, 1..3).unwrap();
        assert!((s[1] - 0.5).abs() < 1e-12);
        let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|x| x + 7.0).collect()).collect();
        let s2 = referring_scores(&shifted, 1..3).unwrap();
        assert!((s[0] - s2[0]).abs() < 1e-12);
        assert!(matches!(referring_scores(&logits, 2..2), Err(Error::EmptySpan)));
        let sharp = vec![vec![0.0, 80.0, 0.0]];
        assert!(referring_scores(&sharp, 1..2).unwrap()[0] > 1.0 - 1e-12);
    }
}

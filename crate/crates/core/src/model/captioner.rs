//! Caption head: a small causal transformer decoder whose first input slot is
//! the object query instead of the start token, cross-attending the fused
//! visual tokens.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use super::nn::{
    causal_bias, index_tensor, log_softmax_last, sinusoidal_table, tensor, Attention, Builder, Init,
    LayerNorm, Linear, Mlp,
};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::vocab::{EOS, PAD};

#[derive(Debug, Clone)]
struct CaptionBlock {
    self_attn: Attention,
    cross_attn: Attention,
    ffn: Mlp,
    norms: Vec<LayerNorm>,
}

impl CaptionBlock {
    fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&vb.pp("self"), cfg.d, cfg.heads)?,
            cross_attn: Attention::new(&vb.pp("cross"), cfg.d, cfg.heads)?,
            ffn: Mlp::new(&vb.pp("ffn"), cfg.d, cfg.ffn, cfg.d)?,
            norms: (0..3)
                .map(|i| LayerNorm::new(&vb.pp(format!("norm{i}")), cfg.d))
                .collect::<Result<_>>()?,
        })
    }

    fn forward(&self, x: &Tensor, v: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let x = self.norms[0].forward(&(x + self.self_attn.forward(x, x, x, None, Some(causal))?)?)?;
        let x = self.norms[1].forward(&(&x + self.cross_attn.forward(&x, v, v, None, None)?)?)?;
        self.norms[2].forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

/// Sampled captions with the log-probability of every emitted token.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBatch {
    /// Emitted tokens per query, up to and including the first EOS.
    pub tokens: Vec<Vec<u32>>,
    pub logprobs: Vec<Vec<f64>>,
}

impl CaptionBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.len()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Captioner {
    prefix: Linear,
    embed: Tensor,
    blocks: Vec<CaptionBlock>,
    head: Linear,
    d: usize,
    pub max_len: usize,
}

impl Captioner {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            prefix: Linear::new(&vb.pp("prefix"), cfg.d, cfg.d)?,
            embed: vb.param("embed", &[cfg.vocab_size, cfg.d], Init::Normal(0.5))?,
            blocks: (0..cfg.caption_blocks)
                .map(|i| CaptionBlock::new(&vb.pp(format!("block{i}")), cfg))
                .collect::<Result<_>>()?,
            head: Linear::new(&vb.pp("head"), cfg.d, cfg.vocab_size)?,
            d: cfg.d,
            max_len: cfg.caption_max_len,
        })
    }

    /// Replaces the embedding row of `id` by zeros (prefix-replacement checks).
    pub fn zero_embedding_row(&mut self, id: u32) -> Result<()> {
        let (v, d) = self.embed.dims2()?;
        let mut keep = vec![1.0; v];
        keep[id as usize] = 0.0;
        let keep = tensor(keep, &[v, 1], self.embed.dtype(), self.embed.device())?;
        self.embed = self.embed.broadcast_mul(&keep)?;
        debug_assert_eq!(self.embed.dim(1)?, d);
        Ok(())
    }

    /// Teacher-forced logits `(B, T, vocab)`. Every sequence starts with a
    /// placeholder slot (the SOS position) that is replaced by the projected
    /// query; `q` is `(B, d)` and `v` is `(B, n, d)`.
    pub fn forward(&self, q: &Tensor, v: &Tensor, seqs: &[Vec<u32>]) -> Result<Tensor> {
        let b = seqs.len();
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if t > self.max_len {
            return Err(Error::SequenceTooLong { len: t, max: self.max_len });
        }
        if t == 0 {
            return Err(Error::config("empty caption sequence"));
        }
        let dev = q.device();
        let dtype = q.dtype();
        let prefix = self.prefix.forward(q)?.unsqueeze(1)?;
        let mut x = if t > 1 {
            let ids: Vec<u32> = seqs
                .iter()
                .flat_map(|s| (1..t).map(move |i| s.get(i).copied().unwrap_or(PAD)))
                .collect();
            let ids = Tensor::from_vec(ids, b * (t - 1), dev)?;
            let emb = self.embed.index_select(&ids, 0)?.reshape((b, t - 1, self.d))?;
            Tensor::cat(&[&prefix, &emb], 1)?
        } else {
            prefix
        };
        let pe = tensor(sinusoidal_table(t, self.d), &[1, t, self.d], dtype, dev)?;
        x = x.broadcast_add(&pe)?;
        let causal = causal_bias(t, dtype, dev)?;
        for blk in &self.blocks {
            x = blk.forward(&x, v, &causal)?;
        }
        self.head.forward(&x)
    }

    fn step_logprobs(&self, q: &Tensor, v: &Tensor, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward(q, v, prefixes)?;
        let t = logits.dim(1)?;
        let last = logits.narrow(1, t - 1, 1)?.squeeze(1)?;
        Ok(log_softmax_last(&last)?.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Step-wise argmax decoding; stops at EOS or after `max_len` tokens.
    pub fn greedy(&self, q: &Tensor, v: &Tensor, max_len: usize) -> Result<CaptionBatch> {
        self.decode(q, v, max_len, |lp| {
            let (i, p) = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            (i as u32, p)
        })
    }

    /// Multinomial sampling at temperature 1.
    pub fn sample<R: Rng>(&self, q: &Tensor, v: &Tensor, max_len: usize, rng: &mut R) -> Result<CaptionBatch> {
        self.decode(q, v, max_len, |lp| {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            for (i, &p) in lp.iter().enumerate() {
                acc += p.exp();
                if u < acc {
                    return (i as u32, p);
                }
            }
            let last = lp.len() - 1;
            (last as u32, lp[last])
        })
    }

    fn decode(
        &self,
        q: &Tensor,
        v: &Tensor,
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> (u32, f64),
    ) -> Result<CaptionBatch> {
        let b = q.dim(0)?;
        let max_len = max_len.min(self.max_len.saturating_sub(1)).max(1);
        let mut seqs: Vec<Vec<u32>> = vec![vec![crate::vocab::SOS]; b];
        let mut logprobs: Vec<Vec<f64>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            let active: Vec<usize> = (0..b).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let idx = index_tensor(&active, q.device())?;
            let (qa, va) = (q.index_select(&idx, 0)?, v.index_select(&idx, 0)?);
            let prefixes: Vec<Vec<u32>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let lp = self.step_logprobs(&qa, &va, &prefixes)?;
            for (row, &i) in lp.iter().zip(&active) {
                let (tok, p) = pick(row);
                seqs[i].push(tok);
                logprobs[i].push(p);
                if tok == EOS {
                    done[i] = true;
                }
            }
        }
        Ok(CaptionBatch {
            tokens: seqs.into_iter().map(|s| s[1..].to_vec()).collect(),
            logprobs,
        })
    }

    /// Per-sequence sums of teacher-forced log-probabilities of `emitted`
    /// (tokens after the prefix slot), differentiable: `(B,)`.
    pub fn sequence_logprob(&self, q: &Tensor, v: &Tensor, emitted: &[Vec<u32>]) -> Result<Tensor> {
        let seqs: Vec<Vec<u32>> = emitted
            .iter()
            .map(|e| std::iter::once(crate::vocab::SOS).chain(e.iter().copied()).collect())
            .collect();
        let logits = self.forward(q, v, &seqs)?;
        let (b, t, _) = logits.dims3()?;
        let lp = log_softmax_last(&logits.narrow(1, 0, t - 1)?)?;
        let mut tgt = Vec::with_capacity(b * (t - 1));
        let mut mask = Vec::with_capacity(b * (t - 1));
        for e in emitted {
            for i in 0..t - 1 {
                tgt.push(e.get(i).copied().unwrap_or(PAD));
                mask.push(if i < e.len() { 1.0 } else { 0.0 });
            }
        }
        let tgt = Tensor::from_vec(tgt, (b, t - 1, 1), q.device())?;
        let mask = tensor(mask, &[b, t - 1], q.dtype(), q.device())?;
        Ok(lp.gather(&tgt, D::Minus1)?.squeeze(D::Minus1)?.mul(&mask)?.sum(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn model() -> (Captioner, ModelConfig) {
        let cfg = ModelConfig::tiny(47);
        let vb = Builder::new(11, DType::F64, Device::Cpu);
        (Captioner::new(&vb, &cfg).unwrap(), cfg)
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let (cap, cfg) = model();
        let q = rand(&[1, cfg.d], 1);
        let v = rand(&[1, 6, cfg.d], 2);
        let a = cap.forward(&q, &v, &[vec![1, 10, 11, 12, 13]]).unwrap().to_vec3::<f64>().unwrap();
        let b = cap.forward(&q, &v, &[vec![1, 10, 11, 30, 31]]).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a[0][..3], b[0][..3]);
        assert_ne!(a[0][3], b[0][3]);
    }

    #[test]
    fn query_prefix_changes_first_step() {
        let (cap, cfg) = model();
        let v = rand(&[1, 6, cfg.d], 2);
        let a = cap.forward(&rand(&[1, cfg.d], 1), &v, &[vec![1]]).unwrap().to_vec3::<f64>().unwrap();
        let b = cap.forward(&rand(&[1, cfg.d], 5), &v, &[vec![1]]).unwrap().to_vec3::<f64>().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn sos_row_is_never_read() {
        let (mut cap, cfg) = model();
        let q = rand(&[2, cfg.d], 1);
        let v = rand(&[2, 6, cfg.d], 2);
        let seqs = vec![vec![1, 7, 8, 2], vec![1, 9, 2]];
        let a = cap.forward(&q, &v, &seqs).unwrap().to_vec3::<f64>().unwrap();
        cap.zero_embedding_row(crate::vocab::SOS).unwrap();
        let b = cap.forward(&q, &v, &seqs).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_is_teacher_forcing_consistent() {
        let (cap, cfg) = model();
        let q = rand(&[3, cfg.d], 1);
        let v = rand(&[3, 6, cfg.d], 2);
        let out = cap.greedy(&q, &v, 8).unwrap();
        assert_eq!(out, cap.greedy(&q, &v, 8).unwrap());
        for (i, toks) in out.tokens.iter().enumerate() {
            assert!(!toks.is_empty() && toks.len() <= 8);
            let idx = index_tensor(&[i], q.device()).unwrap();
            let qi = q.index_select(&idx, 0).unwrap();
            let vi = v.index_select(&idx, 0).unwrap();
            let seq: Vec<u32> = std::iter::once(1).chain(toks.iter().copied()).collect();
            let logits = cap.forward(&qi, &vi, &[seq]).unwrap().to_vec3::<f64>().unwrap();
            for (t, &tok) in toks.iter().enumerate() {
                let row = &logits[0][t];
                let best = row.iter().enumerate().fold(0, |b, (j, &x)| if x > row[b] { j } else { b });
                assert_eq!(best as u32, tok);
            }
        }
        let total = cap.sequence_logprob(&q, &v, &out.tokens).unwrap().to_vec1::<f64>().unwrap();
        for (i, lp) in out.logprobs.iter().enumerate() {
            assert!((total[i] - lp.iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_limit() {
        let (cap, cfg) = model();
        let out = cap.greedy(&rand(&[2, cfg.d], 1), &rand(&[2, 6, cfg.d], 2), 1).unwrap();
        assert!(out.tokens.iter().all(|t| t.len() == 1));
    }

    #[test]
    fn sampling_is_seeded_and_logprobs_nonpositive() {
        let (cap, cfg) = model();
        let q = rand(&[2, cfg.d], 1);
        let v = rand(&[2, 6, cfg.d], 2);
        let a = cap.sample(&q, &v, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = cap.sample(&q, &v, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.logprobs.iter().flatten().all(|&p| p <= 0.0));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let (cap, cfg) = model();
        let seq = vec![1u32; cfg.caption_max_len + 1];
        let r = cap.forward(&rand(&[1, cfg.d], 1), &rand(&[1, 6, cfg.d], 2), &[seq]);
        assert!(matches!(r, Err(Error::SequenceTooLong { .. })));
    }
}

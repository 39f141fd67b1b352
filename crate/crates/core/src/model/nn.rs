//! Parameter store and the small set of differentiable layers the model is
//! built from. Everything is composed from primitive tensor ops so backprop
//! covers it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Additive bias that removes a logit from every softmax (exp underflows to 0).
pub const MASK_NEG: f64 = -1e9;

/// Named trainable parameters in insertion-independent (sorted) order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

struct BuilderState {
    store: ParamStore,
    rng: ChaCha8Rng,
}

/// Hands out parameters under a dotted name prefix, drawing initial values
/// from a seeded stream so model construction is reproducible.
#[derive(Clone)]
pub struct Builder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl Builder {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                store: ParamStore::new(dtype, device),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().store.dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().store.device.clone()
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut st = self.state.borrow_mut();
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform(a) => (0..count).map(|_| st.rng.random_range(-a..a)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..count).map(|_| dist.sample(&mut st.rng)).collect()
            }
        };
        let dtype = st.store.dtype;
        let t = Tensor::from_vec(values, shape, &st.store.device)?.to_dtype(dtype)?;
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        st.store.insert(full, t)
    }

    /// Consumes the builder; panics if a sub-builder is still alive.
    pub fn finish(self) -> ParamStore {
        match Rc::try_unwrap(self.state) {
            Ok(cell) => cell.into_inner().store,
            Err(rc) => rc.borrow().store.clone(),
        }
    }
}

/// Host values to a tensor of the given dtype.
pub fn tensor(values: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

pub fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &Builder, din: usize, dout: usize) -> Result<Self> {
        let a = 1.0 / (din as f64).sqrt();
        Ok(Self {
            w: vb.param("weight", &[din, dout], Init::Uniform(a))?,
            b: Some(vb.param("bias", &[dout], Init::Zeros)?),
        })
    }

    pub fn no_bias(vb: &Builder, din: usize, dout: usize) -> Result<Self> {
        let a = 1.0 / (din as f64).sqrt();
        Ok(Self {
            w: vb.param("weight", &[din, dout], Init::Uniform(a))?,
            b: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().unwrap();
        let rows = x.elem_count() / din.max(1);
        let y = x.reshape((rows, din))?.matmul(&self.w)?;
        let y = match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(vb: &Builder, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.param("gamma", &[d], Init::Ones)?,
            beta: vb.param("beta", &[d], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two-layer perceptron with ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(vb: &Builder, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&vb.pp("l1"), din, hidden)?,
            l2: Linear::new(&vb.pp("l2"), hidden, dout)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }

    pub fn last(&self) -> &Linear {
        &self.l2
    }

    pub fn last_mut(&mut self) -> &mut Linear {
        &mut self.l2
    }
}

impl Linear {
    /// Replaces the parameters by zero tensors (used to build identity heads in tests).
    pub fn zero_out(&mut self) -> Result<()> {
        self.w = self.w.zeros_like()?;
        self.b = match &self.b {
            Some(b) => Some(b.zeros_like()?),
            None => None,
        };
        Ok(())
    }
}

/// Softmax along the last dimension; the subtracted max is detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xs.broadcast_sub(&lse)?)
}

/// log Σ exp along the last dimension, keepdim.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    Ok(x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?.broadcast_add(&m)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// log(1 + exp(x)), stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Fixed sinusoidal table, `len x d`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * k / d as f64);
            let a = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Sin/cos features of scalars in [0, 1]: for each input value, `freqs` pairs.
pub fn fourier_features(values: &Tensor, freqs: usize) -> Result<Tensor> {
    let dims = values.dims().to_vec();
    let x = values.unsqueeze(D::Minus1)?;
    let scales: Vec<f64> = (0..freqs).map(|f| std::f64::consts::PI * 2f64.powi(f as i32)).collect();
    let s = tensor(scales, &[freqs], values.dtype(), values.device())?;
    let a = x.broadcast_mul(&s)?;
    let f = Tensor::cat(&[a.sin()?, a.cos()?], D::Minus1)?;
    let mut out = dims;
    let last = out.pop().unwrap();
    out.push(last * 2 * freqs);
    Ok(f.reshape(out)?)
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(vb: &Builder, d: usize, heads: usize) -> Result<Self> {
        assert!(d.is_multiple_of(heads), "width {d} not divisible by {heads} heads");
        Ok(Self {
            q: Linear::new(&vb.pp("q"), d, d)?,
            k: Linear::new(&vb.pp("k"), d, d)?,
            v: Linear::new(&vb.pp("v"), d, d)?,
            o: Linear::new(&vb.pp("o"), d, d)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        Ok(x.reshape((b, n, self.heads, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * self.heads, n, dh))?)
    }

    /// `query (B, nq, d)`, `key`/`value (B, nk, d)`.
    /// `key_mask (B, nk)`: 1 keeps a key, 0 drops it; a row with every key
    /// dropped attends to nothing and yields the output bias only.
    /// `attn_bias (nq, nk)`: extra additive bias shared by the batch (causal masks).
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        key_mask: Option<&Tensor>,
        attn_bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, nq, d) = query.dims3()?;
        let nk = key.dim(1)?;
        let h = self.heads;
        let dh = d / h;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let mut scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        if let Some(bias) = attn_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let keep = match key_mask {
            Some(m) => {
                let keep = m.reshape((b, 1, 1, nk))?;
                let bias = ((&keep - 1.0)? * -MASK_NEG)?;
                scores = scores
                    .reshape((b, h, nq, nk))?
                    .broadcast_add(&bias)?
                    .reshape((b * h, nq, nk))?;
                Some(keep)
            }
            None => None,
        };
        let mut w = softmax_last(&scores)?;
        if let Some(keep) = keep {
            w = w.reshape((b, h, nq, nk))?.broadcast_mul(&keep)?.reshape((b * h, nq, nk))?;
        }
        let out = w
            .matmul(&v)?
            .reshape((b, h, nq, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, d))?;
        self.o.forward(&out)
    }
}

/// `(n, n)` additive mask that hides future positions.
pub fn causal_bias(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            v[i * n + j] = MASK_NEG;
        }
    }
    tensor(v, &[n, n], dtype, device)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        let d = (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        d.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap() <= tol
    }

    #[test]
    fn builder_is_seeded() {
        let make = |seed| {
            let vb = Builder::new(seed, DType::F64, Device::Cpu);
            Linear::new(&vb.pp("a"), 3, 4).unwrap();
            vb.finish()
        };
        let (a, b, c) = (make(1), make(1), make(2));
        let w = |s: &ParamStore| s.get("a.weight").unwrap().as_tensor().to_vec2::<f64>().unwrap();
        assert_eq!(w(&a), w(&b));
        assert_ne!(w(&a), w(&c));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 1000.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let ls = log_softmax_last(&x).unwrap().exp().unwrap();
        assert!(close(&ls, &softmax_last(&x).unwrap(), 1e-12));
    }

    #[test]
    fn sigmoid_and_softplus_match_closed_forms() {
        let xs = [-30.0f64, -2.0, 0.0, 0.5, 40.0];
        let x = Tensor::new(&xs, &Device::Cpu).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        let sp = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (i, v) in xs.iter().enumerate() {
            assert!((s[i] - 1.0 / (1.0 + (-v).exp())).abs() < 1e-12);
            assert!((sp[i] - (1.0 + v.exp()).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn fully_masked_attention_returns_bias_only() {
        let vb = Builder::new(0, DType::F64, Device::Cpu);
        let att = Attention::new(&vb, 8, 2).unwrap();
        let dev = Device::Cpu;
        let q = Tensor::randn(0.0, 1.0, (1, 3, 8), &dev).unwrap();
        let k1 = Tensor::randn(0.0, 1.0, (1, 4, 8), &dev).unwrap();
        let k2 = Tensor::randn(0.0, 1.0, (1, 4, 8), &dev).unwrap();
        let m = Tensor::zeros((1, 4), DType::F64, &dev).unwrap();
        let a = att.forward(&q, &k1, &k1, Some(&m), None).unwrap();
        let b = att.forward(&q, &k2, &k2, Some(&m), None).unwrap();
        assert!(close(&a, &b, 0.0));
    }

    #[test]
    fn masked_keys_do_not_matter() {
        let vb = Builder::new(0, DType::F64, Device::Cpu);
        let att = Attention::new(&vb, 8, 2).unwrap();
        let dev = Device::Cpu;
        let q = Tensor::randn(0.0, 1.0, (1, 3, 8), &dev).unwrap();
        let k = Tensor::randn(0.0, 1.0, (1, 4, 8), &dev).unwrap();
        let junk = Tensor::randn(0.0, 1.0, (1, 2, 8), &dev).unwrap();
        let k_ext = Tensor::cat(&[&k, &junk], 1).unwrap();
        let m = Tensor::new(&[[1.0f64, 1.0, 1.0, 1.0, 0.0, 0.0]], &dev).unwrap();
        let a = att.forward(&q, &k, &k, None, None).unwrap();
        let b = att.forward(&q, &k_ext, &k_ext, Some(&m), None).unwrap();
        assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn fourier_feature_width() {
        let x = Tensor::zeros((2, 5, 6), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(fourier_features(&x, 4).unwrap().dims(), &[2, 5, 48]);
    }
}

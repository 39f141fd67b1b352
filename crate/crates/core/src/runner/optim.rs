//! AdamW with named parameter groups.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    group: usize,
    m: Tensor,
    v: Tensor,
}

/// Parameters are assigned to groups by name; each group has its own base
/// rate. Parameters absent from every group are frozen.
pub struct AdamW {
    slots: Vec<Slot>,
    base_lr: Vec<f64>,
    factor: f64,
    params: AdamWParams,
    step: usize,
}

impl AdamW {
    /// `groups`: `(base_lr, parameter names)`.
    pub fn new(store: &ParamStore, groups: &[(f64, Vec<String>)], params: AdamWParams) -> Result<Self> {
        let mut slots = Vec::new();
        for (g, (_, names)) in groups.iter().enumerate() {
            for name in names {
                let var = store
                    .get(name)
                    .ok_or_else(|| crate::Error::config(format!("unknown parameter `{name}`")))?
                    .clone();
                let z = var.as_tensor().zeros_like()?;
                slots.push(Slot {
                    name: name.clone(),
                    var,
                    group: g,
                    m: z.clone(),
                    v: z,
                });
            }
        }
        Ok(Self {
            slots,
            base_lr: groups.iter().map(|g| g.0).collect(),
            factor: 1.0,
            params,
            step: 0,
        })
    }

    /// Schedule multiplier applied to every group.
    pub fn set_factor(&mut self, factor: f64) {
        self.factor = factor;
    }

    pub fn lr(&self, group: usize) -> f64 {
        self.base_lr[group] * self.factor
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn trained_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Global L2 norm of the gradients of the trained parameters.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Gradients are scaled by `grad_scale` first (used for clipping).
    pub fn step(&mut self, grads: &GradStore, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let t = self.step as i32;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for i in 0..self.slots.len() {
            let lr = self.lr(self.slots[i].group);
            let s = &mut self.slots[i];
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            // gradients can carry autograd history; keep the moments free of it
            let g = (g.detach() * grad_scale)?;
            s.m = ((&s.m * p.beta1)? + (&g * (1.0 - p.beta1))?)?.detach();
            s.v = ((&s.v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?.detach();
            let mhat = (&s.m / bc1)?;
            let vhat = (&s.v / bc2)?;
            let update = (mhat / (vhat.sqrt()? + p.eps)?)?;
            let w = s.var.as_tensor().detach();
            let decayed = (w * (1.0 - lr * p.weight_decay))?;
            s.var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`, plus the step count.
    pub fn state(&self) -> (BTreeMap<String, Tensor>, usize) {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("m.{}", s.name), s.m.clone());
            out.insert(format!("v.{}", s.name), s.v.clone());
        }
        (out, self.step)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for s in &mut self.slots {
            if let (Some(m), Some(v)) = (state.get(&format!("m.{}", s.name)), state.get(&format!("v.{}", s.name))) {
                s.m = m.to_dtype(s.m.dtype())?;
                s.v = v.to_dtype(s.v.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }

    /// Plain `w -= lr * g` on every trained parameter; probes the group rates.
    pub fn sgd_step(&self, grads: &GradStore) -> Result<()> {
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                s.var.set(&(s.var.as_tensor().detach() - (g.detach() * self.lr(s.group))?)?)?;
            }
        }
        Ok(())
    }
}

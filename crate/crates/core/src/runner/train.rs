//! Training stages: grounding pre-training, joint MLE, SCST.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Checkpoint, CheckpointMeta, Stage};
use super::config::{Schedule, Scheme, TrainConfig};
use super::data::Dataset;
use super::optim::{AdamW, AdamWParams};
use crate::datagen::TextKind;
use crate::error::{Error, Result};
use crate::losses::{
    compose_total, compose_total_tensor, hungarian_match, loss_cap_mle, loss_scst, vg_losses, LossReport,
    LossWeights,
};
use crate::metrics::CiderD;
use crate::model::nn::tensor;
use crate::model::{GroundCap, SceneGeometry, VgForward};
use crate::vocab::Vocabulary;

/// Grounding forward over `texts`; each distinct scene is encoded once.
pub fn forward_texts(model: &GroundCap, data: &Dataset, texts: &[usize]) -> Result<VgForward> {
    let mut scenes: Vec<usize> = Vec::new();
    let mut scene_of = Vec::with_capacity(texts.len());
    for &t in texts {
        let s = data.texts[t].scene;
        let pos = match scenes.iter().position(|&x| x == s) {
            Some(p) => p,
            None => {
                scenes.push(s);
                scenes.len() - 1
            }
        };
        scene_of.push(pos);
    }
    let geoms: Vec<&SceneGeometry> = scenes.iter().map(|&s| &data.scenes[s].geometry).collect();
    let ids: Vec<&[u32]> = texts.iter().map(|&t| data.texts[t].sample.token_ids.as_slice()).collect();
    model.forward_vg(&geoms, &ids, &scene_of)
}

fn kps_batch(model: &GroundCap, data: &Dataset, texts: &[usize]) -> Result<Tensor> {
    let n = model.cfg.num_tokens;
    let y: Vec<f64> = texts.iter().flat_map(|&t| data.scenes[data.texts[t].scene].kps.clone()).collect();
    tensor(y, &[texts.len(), n], model.dtype(), model.device())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Full objective on one batch. With `captions`, every prompt text's matched
/// queries are captioned against a randomly drawn reference of their object.
pub fn batch_loss(
    model: &GroundCap,
    data: &Dataset,
    texts: &[usize],
    w: &LossWeights,
    captions: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, LossReport)> {
    let fwd = forward_texts(model, data, texts)?;
    let targets: Vec<_> = texts.iter().map(|&t| data.texts[t].targets.clone()).collect();
    let vg = vg_losses(&fwd, &targets, &kps_batch(model, data, texts)?)?;
    let mut l_cap = None;
    if let Some(rng) = captions {
        let mut pairs = Vec::new();
        let mut seqs = Vec::new();
        for (i, &t) in texts.iter().enumerate() {
            let text = &data.texts[t];
            if text.kind() != TextKind::Prompt {
                continue;
            }
            let scene = &data.scenes[text.scene];
            for &(q, g) in &vg.last_matching[i].pairs {
                let refs = &scene.captions[&text.targets[g].object_id];
                if refs.is_empty() {
                    continue;
                }
                pairs.push((i, q));
                seqs.push(refs[rng.random_range(0..refs.len())].clone());
            }
        }
        if !pairs.is_empty() {
            let (q, v) = model.caption_inputs(&fwd, &pairs)?;
            let logits = model.captioner.forward(&q, &v, &seqs)?;
            l_cap = Some(loss_cap_mle(&logits, &seqs)?);
        }
    }
    let total = compose_total_tensor(&vg.layers, l_cap.as_ref(), Some(&vg.kps), w)?;
    let layers = vg.layers.iter().map(|l| l.values()).collect::<Result<Vec<_>>>()?;
    let cap = match &l_cap {
        Some(c) => scalar(c)?,
        None => 0.0,
    };
    let report = compose_total(&layers, cap, scalar(&vg.kps)?, w);
    Ok((total, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Shuffled scene batches for `epoch`, reproducible from `seed`.
pub fn epoch_batches(num_scenes: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn clip_scale(opt: &AdamW, grads: &candle_core::backprop::GradStore, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Ok(1.0);
    }
    let norm = opt.grad_norm(grads)?;
    Ok(if norm > max_norm { max_norm / norm } else { 1.0 })
}

/// Hooks called after each epoch (checkpointing, evaluation, logging).
pub type EpochHook<'a> = dyn FnMut(&GroundCap, &AdamW, &EpochLog) -> Result<()> + 'a;

struct Loop<'a> {
    model: &'a GroundCap,
    data: &'a Dataset,
    schedule: &'a Schedule,
    seed: u64,
    grad_clip: f64,
    stage: &'static str,
}

impl Loop<'_> {
    fn run(
        &self,
        opt: &mut AdamW,
        start_epoch: usize,
        mut loss_fn: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<Option<Tensor>>,
        hook: &mut EpochHook,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        for epoch in start_epoch..self.schedule.epochs {
            let start = Instant::now();
            opt.set_factor(self.schedule.factor(epoch));
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1 + epoch as u64));
            let (mut sum, mut count) = (0.0, 0usize);
            for (step, batch) in epoch_batches(self.data.scenes.len(), self.schedule.batch_size, self.seed, epoch)
                .iter()
                .enumerate()
            {
                let Some(loss) = loss_fn(batch, &mut rng)? else {
                    continue;
                };
                let value = scalar(&loss)?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step });
                }
                let grads = loss.backward()?;
                let scale = clip_scale(opt, &grads, self.grad_clip)?;
                opt.step(&grads, scale)?;
                sum += value;
                count += 1;
            }
            let log = EpochLog {
                epoch,
                mean_loss: if count == 0 { 0.0 } else { sum / count as f64 },
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "{} epoch {}/{}: loss {:.4} ({:.1}s)",
                self.stage,
                epoch + 1,
                self.schedule.epochs,
                log.mean_loss,
                log.seconds
            );
            hook(self.model, opt, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

fn adamw(cfg: &TrainConfig) -> AdamWParams {
    AdamWParams {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    }
}

/// Stage output: the trained model plus per-epoch logs.
pub struct Trained {
    pub model: GroundCap,
    pub logs: Vec<EpochLog>,
    pub meta: CheckpointMeta,
    pub opt_state: std::collections::BTreeMap<String, Tensor>,
}

impl Trained {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save(path, &self.model, &self.meta, &self.opt_state)
    }
}

/// Grounding pre-training (no caption head). Resumes when `resume` holds a
/// pretrain checkpoint.
pub fn train_vg_pretrain(
    cfg: &TrainConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    hook: &mut EpochHook,
) -> Result<Trained> {
    cfg.validate()?;
    let (model, start, opt_state) = match resume {
        Some(ck) if ck.meta.stage == Stage::Pretrain => (ck.model, ck.meta.epoch, Some((ck.opt_state, ck.meta.opt_step))),
        Some(_) => return Err(Error::Checkpoint("resume needs a pretrain checkpoint".into())),
        None => (GroundCap::new(&cfg.model, cfg.seed, DType::F32)?, 0, None),
    };
    let mut opt = AdamW::new(&model.params, &[(cfg.pretrain.lr, model.param_names(false))], adamw(cfg))?;
    if let Some((s, step)) = &opt_state {
        opt.load_state(s, *step)?;
    }
    let w = cfg.weights();
    let lp = Loop {
        model: &model,
        data,
        schedule: &cfg.pretrain.schedule,
        seed: cfg.seed,
        grad_clip: cfg.grad_clip,
        stage: "pretrain",
    };
    let logs = lp.run(
        &mut opt,
        start,
        |batch, _| {
            let texts = data.texts_of(batch, |_| true);
            Ok(Some(batch_loss(&model, data, &texts, &w, None)?.0))
        },
        hook,
    )?;
    let (opt_state, opt_step) = opt.state();
    Ok(Trained {
        meta: CheckpointMeta {
            config: cfg.clone(),
            stage: Stage::Pretrain,
            epoch: cfg.pretrain.schedule.epochs,
            opt_step,
        },
        model,
        logs,
        opt_state,
    })
}

/// Parameter groups of a joint-stage scheme.
pub fn scheme_groups(model: &GroundCap, cfg: &TrainConfig) -> Vec<(f64, Vec<String>)> {
    let m = &cfg.mle;
    let cap = model.param_names(true);
    let vg = model.param_names(false);
    match m.scheme {
        Scheme::DcSingleLr | Scheme::JointSingleLr => {
            let mut all = vg;
            all.extend(cap);
            vec![(m.lr_cap, all)]
        }
        Scheme::DcTwoLr | Scheme::JointTwoLr => vec![(m.lr_vg, vg), (m.lr_cap, cap)],
        Scheme::DcFrozen => vec![(m.lr_cap, cap)],
    }
}

/// Joint MLE stage starting from pre-trained grounding weights. The
/// checkpoint supplies weights only; the schedule comes from `cfg`.
pub fn train_joint_mle(cfg: &TrainConfig, data: &Dataset, vg: GroundCap, hook: &mut EpochHook) -> Result<Trained> {
    cfg.validate()?;
    if vg.cfg != cfg.model {
        return Err(Error::config("checkpoint model does not match the configured model"));
    }
    let model = vg;
    let mut opt = AdamW::new(&model.params, &scheme_groups(&model, cfg), adamw(cfg))?;
    let w = cfg.weights();
    let joint = cfg.mle.scheme.joint_data();
    let lp = Loop {
        model: &model,
        data,
        schedule: &cfg.mle.schedule,
        seed: cfg.seed.wrapping_add(17),
        grad_clip: cfg.grad_clip,
        stage: "mle",
    };
    let logs = lp.run(
        &mut opt,
        0,
        |batch, rng| {
            let texts = data.texts_of(batch, |k| joint || k == TextKind::Prompt);
            if texts.is_empty() {
                return Ok(None);
            }
            Ok(Some(batch_loss(&model, data, &texts, &w, Some(rng))?.0))
        },
        hook,
    )?;
    let (opt_state, opt_step) = opt.state();
    Ok(Trained {
        meta: CheckpointMeta {
            config: cfg.clone(),
            stage: Stage::Mle,
            epoch: cfg.mle.schedule.epochs,
            opt_step,
        },
        model,
        logs,
        opt_state,
    })
}

/// Per-batch SCST statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScstStats {
    pub captions: usize,
    pub nonzero_advantages: usize,
    pub mean_sampled_reward: f64,
    pub mean_greedy_reward: f64,
}

/// One SCST loss: greedy baseline and one sample per matched query of each prompt.
pub fn scst_batch_loss(
    model: &GroundCap,
    data: &Dataset,
    vocab: &Vocabulary,
    cider: &CiderD,
    texts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Tensor, ScstStats)>> {
    let fwd = forward_texts(model, data, texts)?;
    let last = fwd.last();
    let boxes: Vec<Vec<Vec<f64>>> = last.boxes.to_dtype(DType::F64)?.to_vec3()?;
    let align: Vec<Vec<Vec<f64>>> = last.align.to_dtype(DType::F64)?.to_vec3()?;
    let mut pairs = Vec::new();
    let mut refs: Vec<&[String]> = Vec::new();
    for (i, &t) in texts.iter().enumerate() {
        let text = &data.texts[t];
        let m = hungarian_match(&boxes[i], &align[i], &text.targets)?;
        for (q, g) in m.pairs {
            pairs.push((i, q));
            refs.push(&data.scenes[text.scene].caption_text[&text.targets[g].object_id]);
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let (q, v) = model.caption_inputs(&fwd, &pairs)?;
    let (q, v) = (q.detach(), v.detach());
    let max_len = model.cfg.caption_max_len;
    let greedy = model.captioner.greedy(&q, &v, max_len)?;
    let sampled = model.captioner.sample(&q, &v, max_len, rng)?;
    let score = |toks: &[u32], r: &[String]| -> Result<f64> { Ok(cider.score(&vocab.decode(toks)?, r)) };
    let mut rs = Vec::with_capacity(pairs.len());
    let mut rg = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        rs.push(score(&sampled.tokens[i], refs[i])?);
        rg.push(score(&greedy.tokens[i], refs[i])?);
    }
    let lp = model.captioner.sequence_logprob(&q, &v, &sampled.tokens)?;
    let loss = loss_scst(&lp, &rs, &rg)?;
    let n = pairs.len() as f64;
    let stats = ScstStats {
        captions: pairs.len(),
        nonzero_advantages: rs.iter().zip(&rg).filter(|(a, b)| a != b).count(),
        mean_sampled_reward: rs.iter().sum::<f64>() / n,
        mean_greedy_reward: rg.iter().sum::<f64>() / n,
    };
    Ok(Some((loss, stats)))
}

/// Caption-head-only fine-tuning with the CIDEr-D reward.
pub fn train_scst(
    cfg: &TrainConfig,
    data: &Dataset,
    vocab: &Vocabulary,
    mle: GroundCap,
    hook: &mut EpochHook,
) -> Result<Trained> {
    cfg.validate()?;
    let model = mle;
    let mut opt = AdamW::new(&model.params, &[(cfg.scst.lr, model.param_names(true))], adamw(cfg))?;
    let cider = CiderD::new(&data.reference_sets());
    // (summed stats, batches) of the running epoch
    let acc = std::cell::RefCell::new((ScstStats::default(), 0usize));
    let lp = Loop {
        model: &model,
        data,
        schedule: &cfg.scst.schedule,
        seed: cfg.seed.wrapping_add(29),
        grad_clip: cfg.grad_clip,
        stage: "scst",
    };
    let mut wrapped = |m: &GroundCap, o: &AdamW, log: &EpochLog| -> Result<()> {
        let (s, n) = acc.replace((ScstStats::default(), 0));
        if s.captions > 0 && s.nonzero_advantages == 0 {
            log::warn!("scst epoch {}: every advantage was zero; the reward gives no signal", log.epoch + 1);
        } else if n > 0 {
            log::info!(
                "scst epoch {}: reward sampled {:.3} greedy {:.3}",
                log.epoch + 1,
                s.mean_sampled_reward / n as f64,
                s.mean_greedy_reward / n as f64
            );
        }
        hook(m, o, log)
    };
    let logs = lp.run(
        &mut opt,
        0,
        |batch, rng| {
            let texts = data.texts_of(batch, |k| k == TextKind::Prompt);
            if texts.is_empty() {
                return Ok(None);
            }
            let Some((loss, st)) = scst_batch_loss(&model, data, vocab, &cider, &texts, rng)? else {
                return Ok(None);
            };
            let mut a = acc.borrow_mut();
            a.0.captions += st.captions;
            a.0.nonzero_advantages += st.nonzero_advantages;
            a.0.mean_sampled_reward += st.mean_sampled_reward;
            a.0.mean_greedy_reward += st.mean_greedy_reward;
            a.1 += 1;
            Ok(Some(loss))
        },
        &mut wrapped,
    )?;
    let (opt_state, opt_step) = opt.state();
    Ok(Trained {
        meta: CheckpointMeta {
            config: cfg.clone(),
            stage: Stage::Scst,
            epoch: cfg.scst.schedule.epochs,
            opt_step,
        },
        model,
        logs,
        opt_state,
    })
}

/// Hook that does nothing.
pub fn no_hook() -> impl FnMut(&GroundCap, &AdamW, &EpochLog) -> Result<()> {
    |_, _, _| Ok(())
}

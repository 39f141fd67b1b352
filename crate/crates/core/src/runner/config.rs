//! Training configuration, read from a single TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::CorpusConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Training schemes for the joint stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scheme {
    /// Caption data only, one learning rate.
    DcSingleLr = 1,
    /// Caption data only, separate rates for the caption head and the rest.
    DcTwoLr = 2,
    /// Caption data only, grounding weights frozen.
    DcFrozen = 3,
    /// Caption and grounding data, one learning rate.
    JointSingleLr = 4,
    /// Caption and grounding data, two learning rates.
    JointTwoLr = 5,
}

impl Scheme {
    pub fn joint_data(self) -> bool {
        matches!(self, Scheme::JointSingleLr | Scheme::JointTwoLr)
    }

    pub fn two_lr(self) -> bool {
        matches!(self, Scheme::DcTwoLr | Scheme::JointTwoLr)
    }

    pub fn frozen_vg(self) -> bool {
        self == Scheme::DcFrozen
    }
}

impl TryFrom<u8> for Scheme {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Ok(match v {
            1 => Scheme::DcSingleLr,
            2 => Scheme::DcTwoLr,
            3 => Scheme::DcFrozen,
            4 => Scheme::JointSingleLr,
            5 => Scheme::JointTwoLr,
            _ => return Err(format!("scheme must be in 1..=5, got {v}")),
        })
    }
}

impl From<Scheme> for u8 {
    fn from(s: Scheme) -> u8 {
        s as u8
    }
}

/// Step-decay schedule: multiply by `decay_rate` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_rate: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
}

impl Schedule {
    pub fn factor(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.decay_rate.powi(n as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    #[serde(flatten)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MleConfig {
    pub scheme: Scheme,
    /// Rate of every non-caption parameter (two-rate schemes).
    pub lr_vg: f64,
    /// Rate of the caption head; also the single rate of schemes 1 and 4.
    pub lr_cap: f64,
    #[serde(flatten)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScstConfig {
    pub lr: f64,
    #[serde(flatten)]
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaPreset {
    Scanrefer,
    Nr3d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub beta_preset: BetaPreset,
    /// Explicit weights; derived from the preset and layer count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossWeights>,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f64,
    pub pretrain: PretrainConfig,
    pub mle: MleConfig,
    pub scst: ScstConfig,
    pub train_corpus: CorpusConfig,
    pub val_corpus: CorpusConfig,
}

impl TrainConfig {
    /// Laptop-scale defaults.
    pub fn desk(vocab_size: usize) -> Self {
        let model = ModelConfig::desk(vocab_size);
        let val_corpus = CorpusConfig {
            num_scenes: 40,
            first_seed: 1_000_000,
            ..CorpusConfig::default()
        };
        Self {
            seed: 0,
            model,
            beta_preset: BetaPreset::Scanrefer,
            loss: None,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            pretrain: PretrainConfig {
                lr: 1e-3,
                schedule: Schedule {
                    epochs: 8,
                    decay_epochs: vec![6, 7],
                    decay_rate: 0.1,
                    batch_size: 4,
                },
            },
            mle: MleConfig {
                scheme: Scheme::JointTwoLr,
                lr_vg: 1e-5,
                lr_cap: 1e-3,
                schedule: Schedule {
                    epochs: 7,
                    decay_epochs: vec![5, 6],
                    decay_rate: 0.1,
                    batch_size: 4,
                },
            },
            scst: ScstConfig {
                lr: 5e-5,
                schedule: Schedule {
                    epochs: 10,
                    decay_epochs: vec![100, 200],
                    decay_rate: 0.1,
                    batch_size: 8,
                },
            },
            train_corpus: CorpusConfig {
                num_scenes: 3000,
                ..CorpusConfig::default()
            },
            val_corpus,
        }
    }

    /// Full-scale hyperparameters.
    pub fn full(vocab_size: usize) -> Self {
        let desk = Self::desk(vocab_size);
        Self {
            model: ModelConfig::full(vocab_size),
            mle: MleConfig {
                lr_vg: 2e-6,
                lr_cap: 2e-4,
                schedule: Schedule {
                    epochs: 30,
                    decay_epochs: vec![10, 20],
                    ..desk.mle.schedule.clone()
                },
                ..desk.mle.clone()
            },
            scst: ScstConfig {
                lr: 5e-6,
                schedule: Schedule {
                    epochs: 300,
                    ..desk.scst.schedule.clone()
                },
            },
            ..desk
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.loss.unwrap_or_else(|| match self.beta_preset {
            BetaPreset::Scanrefer => LossWeights::scanrefer(self.model.decoder_layers),
            BetaPreset::Nr3d => LossWeights::nr3d(self.model.decoder_layers),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.mle.scheme.two_lr() && self.mle.lr_vg == self.mle.lr_cap {
            return Err(Error::config("two-rate schemes need lr_vg != lr_cap"));
        }
        for s in [&self.pretrain.schedule, &self.mle.schedule, &self.scst.schedule] {
            if s.batch_size == 0 {
                return Err(Error::config("batch_size must be positive"));
            }
        }
        for lr in [self.pretrain.lr, self.mle.lr_vg, self.mle.lr_cap, self.scst.lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config("learning rates must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::desk(47);
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn full_joint_defaults() {
        let p = TrainConfig::full(47);
        assert_eq!(p.mle.lr_vg, 2e-6);
        assert_eq!(p.mle.lr_cap, 2e-4);
        assert_eq!(p.mle.schedule.decay_epochs, vec![10, 20]);
        assert_eq!(p.mle.schedule.decay_rate, 0.1);
        assert_eq!(p.mle.schedule.epochs, 30);
        assert_eq!(p.mle.scheme, Scheme::JointTwoLr);
        assert_eq!(p.scst.lr, 5e-6);
        assert_eq!(p.scst.schedule.batch_size, 8);
        assert_eq!(p.scst.schedule.decay_epochs, vec![100, 200]);
        assert_eq!(p.weights().alpha[0], 1.0 / 7.0);
    }

    #[test]
    fn scheme_lr_consistency() {
        let mut cfg = TrainConfig::desk(47);
        cfg.mle.lr_vg = cfg.mle.lr_cap;
        assert!(cfg.validate().is_err());
        cfg.mle.scheme = Scheme::JointSingleLr;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn bad_scheme_rejected() {
        let text = TrainConfig::desk(47).to_toml().unwrap().replace("scheme = 5", "scheme = 7");
        assert!(TrainConfig::from_toml(&text).is_err());
    }

    #[test]
    fn schedule_factor() {
        let s = Schedule {
            epochs: 30,
            decay_epochs: vec![10, 20],
            decay_rate: 0.1,
            batch_size: 1,
        };
        assert_eq!(s.factor(0), 1.0);
        assert_eq!(s.factor(10), 0.1);
        assert!((s.factor(25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn nr3d_preset_changes_beta() {
        let mut cfg = TrainConfig::desk(47);
        cfg.beta_preset = BetaPreset::Nr3d;
        assert_eq!(cfg.weights().beta, [5.0, 1.0, 1.0, 1.0, 1.0]);
    }
}

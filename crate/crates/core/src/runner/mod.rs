//! Configuration, training stages, checkpoints, inference and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod infer;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};
pub use config::{BetaPreset, MleConfig, PretrainConfig, Schedule, Scheme, ScstConfig, TrainConfig};
pub use data::{Dataset, PreparedScene, PreparedText};
pub use eval::{dc_report, evaluate, predict_dc, predict_vg, vg_report, write_report, DcPrediction, Report, Task, VgPrediction};
pub use infer::{ground_text, head_noun_span, infer_dc, infer_vg, predict_labels, DcOptions};
pub use optim::{AdamW, AdamWParams};
pub use train::{
    batch_loss, forward_texts, no_hook, scst_batch_loss, train_joint_mle, train_scst, train_vg_pretrain, EpochLog,
    Trained,
};

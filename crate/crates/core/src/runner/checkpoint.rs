//! Single-file checkpoints: safetensors weights with the config in the header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::GroundCap;

const PARAM_PREFIX: &str = "param.";
const OPT_PREFIX: &str = "opt.";
const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrain,
    Mle,
    Scst,
}

impl Stage {
    fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Mle => "mle",
            Stage::Scst => "scst",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "init" => Stage::Init,
            "pretrain" => Stage::Pretrain,
            "mle" => Stage::Mle,
            "scst" => Stage::Scst,
            _ => return Err(Error::Checkpoint(format!("unknown stage `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub opt_step: usize,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: GroundCap,
    pub opt_state: BTreeMap<String, Tensor>,
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save(
    path: impl AsRef<Path>,
    model: &GroundCap,
    meta: &CheckpointMeta,
    opt_state: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in model.params.iter() {
        tensors.insert(format!("{PARAM_PREFIX}{name}"), var.as_tensor().clone());
    }
    for (name, t) in opt_state {
        tensors.insert(format!("{OPT_PREFIX}{name}"), t.clone());
    }
    let mut header = HashMap::new();
    header.insert("format".to_string(), FORMAT_VERSION.to_string());
    header.insert("config".to_string(), meta.config.to_toml()?);
    header.insert("stage".to_string(), meta.stage.as_str().to_string());
    header.insert("epoch".to_string(), meta.epoch.to_string());
    header.insert("opt_step".to_string(), meta.opt_step.to_string());
    header.insert("dtype".to_string(), format!("{:?}", model.dtype()));
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn header_field<'a>(header: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    header
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing header field `{key}`")))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (_, md) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header = md
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
    if header_field(&header, "format")? != FORMAT_VERSION {
        return Err(Error::Checkpoint("unsupported format version".into()));
    }
    let config = TrainConfig::from_toml(header_field(&header, "config")?)?;
    let dtype = match header_field(&header, "dtype")? {
        "F64" => DType::F64,
        "F32" => DType::F32,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    };
    let parse = |k: &str| -> Result<usize> {
        header_field(&header, k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad `{k}`")))
    };
    let meta = CheckpointMeta {
        stage: Stage::parse(header_field(&header, "stage")?)?,
        epoch: parse("epoch")?,
        opt_step: parse("opt_step")?,
        config,
    };
    let model = GroundCap::new(&meta.config.model, meta.config.seed, dtype)?;
    let mut opt_state = BTreeMap::new();
    let mut seen = 0;
    for (name, view) in st.tensors() {
        let t = candle_core::safetensors::Load::load(&view, &Device::Cpu)?;
        if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
            let var = model
                .params
                .get(p)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{p}`")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{p}`")));
            }
            var.set(&t)?;
            seen += 1;
        } else if let Some(o) = name.strip_prefix(OPT_PREFIX) {
            opt_state.insert(o.to_string(), t);
        }
    }
    if seen != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {seen} of {} parameters",
            model.params.len()
        )));
    }
    Ok(Checkpoint { meta, model, opt_state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut cfg = TrainConfig::desk(47);
        cfg.model = ModelConfig::tiny(47);
        let model = GroundCap::new(&cfg.model, 5, DType::F32).unwrap();
        let meta = CheckpointMeta {
            config: cfg.clone(),
            stage: Stage::Pretrain,
            epoch: 3,
            opt_step: 12,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let mut opt = BTreeMap::new();
        opt.insert("m.x".to_string(), Tensor::ones(3, DType::F32, &Device::Cpu).unwrap());
        save(&path, &model, &meta, &opt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.opt_state.len(), 1);
        for (name, var) in model.params.iter() {
            let a: Vec<f32> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = back.model.params.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{name}");
        }
        assert!(!path.with_extension("tmp").exists());
    }
}

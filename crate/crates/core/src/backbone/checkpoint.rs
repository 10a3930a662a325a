//! Checkpoints: one tensor container plus a JSON metadata sidecar
//! (`<path>.meta.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{Backbone, BaseLm, LoraSet};
use super::{EmotionModel, ToyLmConfig, TrainConfig};
use crate::adapter::AdapterSet;
use crate::error::{Error, Result};
use crate::formats::TensorContainer;
use crate::prefusion::{PreFusionConfig, PreFusionParams};
use crate::token_pipeline::PipelineConfig;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub pipeline: PipelineConfig,
    pub prefusion: PreFusionConfig,
    pub model: ToyLmConfig,
    pub train: TrainConfig,
    /// Optimizer steps taken by the stage that wrote the checkpoint.
    pub step: usize,
    /// 0 for an untrained or base-pretrained model, else the stage.
    pub stage: u8,
    pub seed: u64,
    pub input_dims: [usize; 3],
    pub labels: Vec<String>,
    pub vocab: Vec<String>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl EmotionModel {
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.extend_prefixed("prefusion.", self.prefusion.to_container());
        c.extend_prefixed("adapter.", self.adapters.to_container());
        c.extend_prefixed("base.", self.backbone.base.to_container());
        if let Some(lora) = &self.backbone.lora {
            c.extend_prefixed("lora.", lora.to_container());
        }
        c
    }
}

pub fn save_checkpoint(path: &Path, model: &EmotionModel, train: &TrainConfig, stage: u8, step: usize) -> Result<()> {
    let meta = CheckpointMeta {
        pipeline: model.pipeline.clone(),
        prefusion: model.prefusion_cfg.clone(),
        model: model.backbone.cfg().clone(),
        train: train.clone(),
        step,
        stage,
        seed: train.seed,
        input_dims: model.input_dims,
        labels: model.labels.clone(),
        vocab: model.vocab.tokens().to_vec(),
    };
    model.to_container().save(path)?;
    let mp = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EmotionModel, CheckpointMeta)> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::format(&mp, e.to_string()))?;
    let c = TensorContainer::load(path)?;
    let vocab = Vocab::from_tokens(meta.vocab.clone())?;
    if vocab.len() != meta.model.vocab_size {
        return Err(Error::format(&mp, "vocabulary size disagrees with the model config"));
    }
    let base = BaseLm::from_container(&meta.model, &c.with_prefix("base."))?;
    let lora_tensors = c.with_prefix("lora.");
    let lora = if lora_tensors.is_empty() { None } else { Some(LoraSet::from_container(&meta.model, &lora_tensors)?) };
    let prefusion = PreFusionParams::from_container(&c.with_prefix("prefusion."))?;
    let adapters = AdapterSet::from_container(&c.with_prefix("adapter."))?;
    let model = EmotionModel {
        pipeline: meta.pipeline.clone(),
        prefusion_cfg: meta.prefusion.clone(),
        prefusion,
        adapters,
        backbone: Backbone::new(base, lora),
        vocab,
        labels: meta.labels.clone(),
        input_dims: meta.input_dims,
    };
    Ok((model, meta))
}

//! Run configuration: every module's knobs in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::EndpointTable;
use crate::backbone::{ToyLmConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::prefusion::PreFusionConfig;
use crate::synthgen::SynthConfig;
use crate::token_pipeline::PipelineConfig;

/// A named average over datasets in a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Split scored when evaluating a checkpoint.
    pub split: String,
    /// Dataset name used in reports.
    pub dataset: String,
    pub max_new_tokens: usize,
    pub groups: Vec<GroupSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: "test".into(), dataset: "synthetic".into(), max_new_tokens: 48, groups: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seeds of the synth and train sections.
    pub seed: Option<u64>,
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub pipeline: PipelineConfig,
    pub prefusion: PreFusionConfig,
    pub model: ToyLmConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub endpoints: EndpointTable,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            corpus_dir: "corpus".into(),
            output_dir: "runs".into(),
            parallelism: 1,
            pipeline: PipelineConfig::default(),
            prefusion: PreFusionConfig::default(),
            model: ToyLmConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            endpoints: EndpointTable::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.prefusion.validate()?;
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.endpoints.validate()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed.unwrap_or(self.synth.seed), ..self.synth.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed.unwrap_or(self.train.seed), ..self.train.clone() }
    }
}

//! The run configuration file: one JSON object with sections
//! `data`, `encoder`, `model`, `loss`, `train` and `eval`.

use std::path::{Path, PathBuf};

use semprompt::data::{load_dataset, DatasetFormat, DatasetIndex, LoadOptions, MaskSpec};
use semprompt::encoders::EncoderConfig;
use semprompt::metrics::BinarizePolicy;
use semprompt::scoring::LossConfig;
use semprompt::trainer::{ExperimentConfig, TrainConfig};
use semprompt::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub format: DatasetFormat,
    #[serde(default)]
    pub image_root: Option<PathBuf>,
}

impl DatasetSource {
    pub fn load(&self, base: &Path) -> Result<DatasetIndex> {
        let opts = LoadOptions {
            categories: None,
            image_root: self.image_root.as_ref().map(|p| base.join(p)),
        };
        load_dataset(&base.join(&self.path), self.format, &opts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DatasetSource,
    #[serde(default)]
    pub val: Option<DatasetSource>,
    /// Mask generated on the fly.
    #[serde(default)]
    pub mask: Option<MaskSpec>,
    /// Mask manifest written by `semprompt mask`.
    #[serde(default)]
    pub mask_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: BinarizePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; relative paths inside resolve against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.encoder.weights = cfg.encoder.weights.map(|p| base.join(p));
        cfg.encoder.embeddings = cfg.encoder.embeddings.map(|p| base.join(p));
        cfg.validate()?;
        Ok((cfg, base))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.mask.is_some() && self.data.mask_file.is_some() {
            return Err(Error::Config("data.mask and data.mask_file are mutually exclusive".into()));
        }
        if let Some(m) = &self.data.mask {
            m.validate()?;
        }
        self.experiment().validate()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            encoder: self.encoder.clone(),
            model: self.model,
            loss: self.loss,
            train: self.train.clone(),
        }
    }
}

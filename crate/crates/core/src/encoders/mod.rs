//! Frozen visual and text encoders plus the semantic word-vector source.
//!
//! Two backends share the same architecture family. `synthetic` builds
//! fixed-seed random weights for desk-scale runs; `pretrained` loads exported
//! weights from a tensor archive located by config or `SEMPROMPT_WEIGHTS`.
//! Nothing in this module is ever touched by an optimizer.

mod feature_map;
mod semantic;
mod text;
mod visual;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use feature_map::FeatureMap;
pub use semantic::{SemanticSource, SemanticVector};
pub use text::{TextEmbedding, TextEncoder, TOKEN_EMBEDDING_STD};
pub use visual::{AvgPool, ConvLayer, VisualEncoder};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::imaging::Preprocess;
use crate::scalar::Scalar;

/// Receives `(name, shape, values)` for every frozen tensor.
pub(crate) type WeightVisitor<'a, T> = dyn FnMut(&str, &[usize], Vec<T>) + 'a;

pub const WEIGHTS_ENV: &str = "SEMPROMPT_WEIGHTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackend {
    Pretrained,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: EncoderBackend,
    pub seed: u64,
    pub input_size: usize,
    pub text_dim: usize,
    pub semantic_dim: usize,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Whitespace-separated word-vector file; hashed vectors when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

impl EncoderConfig {
    pub fn synthetic(seed: u64, text_dim: usize, semantic_dim: usize) -> Self {
        Self {
            backend: EncoderBackend::Synthetic,
            seed,
            input_size: 56,
            text_dim,
            semantic_dim,
            weights: None,
            embeddings: None,
        }
    }

    fn weights_path(&self) -> Result<PathBuf> {
        self.weights
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::WeightsUnavailable(format!(
                    "pretrained backend needs encoder.weights or {WEIGHTS_ENV}"
                ))
            })
    }

    pub fn semantic_source(&self, category_names: &[String]) -> Result<SemanticSource> {
        let source = match &self.embeddings {
            Some(path) => SemanticSource::load_text(path, category_names, self.seed)?,
            None => SemanticSource::hashed(self.semantic_dim, self.seed),
        };
        if source.dim() != self.semantic_dim {
            return Err(Error::Config(format!(
                "embedding file has dimension {}, config says semantic_dim={}",
                source.dim(),
                self.semantic_dim
            )));
        }
        Ok(source)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerGeometry {
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveLayout {
    layers: Vec<LayerGeometry>,
    pool: Option<AvgPool>,
    token_seed: u64,
    #[serde(default)]
    temperature: Option<f64>,
}

/// The frozen half of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders<T> {
    pub visual: VisualEncoder<T>,
    pub text: TextEncoder<T>,
    /// Temperature shipped with the backend, if any.
    pub temperature: Option<f64>,
}

impl<T: Scalar> FrozenEncoders<T> {
    pub fn build(cfg: &EncoderConfig, prompt_len: usize) -> Result<Self> {
        if prompt_len < 1 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        match cfg.backend {
            EncoderBackend::Synthetic => Ok(Self {
                visual: VisualEncoder::synthetic(cfg.seed, cfg.input_size)?,
                text: TextEncoder::synthetic(cfg.seed, cfg.text_dim, prompt_len)?,
                temperature: None,
            }),
            EncoderBackend::Pretrained => {
                let path = cfg.weights_path()?;
                let enc = Self::load_weights(&path, cfg.input_size, prompt_len)?;
                if enc.text.dim() != cfg.text_dim {
                    return Err(Error::Config(format!(
                        "pretrained text encoder has dimension {}, config says text_dim={}",
                        enc.text.dim(),
                        cfg.text_dim
                    )));
                }
                Ok(enc)
            }
        }
    }

    pub fn load_weights(path: &Path, input_size: usize, prompt_len: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::WeightsUnavailable(format!("{} does not exist", path.display())));
        }
        let mut archive = Archive::<T>::load(path)?;
        let layout: ArchiveLayout = archive
            .metadata
            .take()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::WeightsUnavailable("weight archive has no layout metadata".into()))?;
        let mut layers = Vec::with_capacity(layout.layers.len());
        for (i, g) in layout.layers.iter().enumerate() {
            layers.push(ConvLayer {
                weight: archive.take_array::<ndarray::Ix4>(&format!("visual.conv{i}.weight"))?,
                bias: archive.take_array::<ndarray::Ix1>(&format!("visual.conv{i}.bias"))?,
                stride: g.stride,
                padding: g.padding,
            });
        }
        let visual = VisualEncoder::new(layers, layout.pool, Preprocess::pretrained(input_size))?;
        let weight: Array2<T> = archive.take_array("text.weight")?;
        let bias: Array1<T> = archive.take_array("text.bias")?;
        let text = TextEncoder::new(weight, bias, prompt_len + 1, layout.token_seed)?;
        Ok(Self {
            visual,
            text,
            temperature: layout.temperature,
        })
    }

    /// Writes these weights in the format [`FrozenEncoders::load_weights`] reads.
    pub fn export_weights(&self, path: &Path, token_seed: u64) -> Result<()> {
        let mut archive = Archive::<T>::new();
        self.visit_weights(&mut |name, shape, values| archive.insert(name, shape, values));
        let layout = ArchiveLayout {
            layers: self
                .visual
                .layers()
                .iter()
                .map(|l| LayerGeometry {
                    stride: l.stride,
                    padding: l.padding,
                })
                .collect(),
            pool: self.visual.pool(),
            token_seed,
            temperature: self.temperature,
        };
        archive.metadata = Some(serde_json::to_value(layout)?);
        archive.save(path)
    }

    fn visit_weights(&self, f: &mut WeightVisitor<'_, T>) {
        self.visual.visit_weights(f);
        self.text.visit_weights(f);
    }

    /// SHA-256 over every frozen weight, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_weights(&mut |name, shape, values| {
            hasher.update(name.as_bytes());
            for d in shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(T::to_le_bytes_vec(&values));
        });
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Random stride-2 conv stack with the geometry of a stride-32 backbone whose
/// last pooling is replaced by a 2x2, stride-2 average pool.
pub fn stride32_backbone<T: Scalar>(seed: u64, width: usize) -> Result<VisualEncoder<T>> {
    let mut rng = crate::seed::rng(seed);
    let mut cin = 3;
    let mut layers = Vec::new();
    for _ in 0..5 {
        layers.push(ConvLayer {
            weight: crate::init::kaiming_uniform(&mut rng, (width, cin, 3, 3), cin * 9, 1.0),
            bias: Array1::zeros(width),
            stride: 2,
            padding: 1,
        });
        cin = width;
    }
    VisualEncoder::new(layers, Some(AvgPool { size: 2, stride: 2 }), Preprocess::pretrained(448))
}

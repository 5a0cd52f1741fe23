//! Training loop: SGD with momentum over the two trainable groups, constant
//! warmup followed by cosine annealing, per-epoch checkpoints and evaluation.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::data::{DatasetIndex, ImageRef, LabelVector};
use crate::decoupling::{ChannelAdapter, DecouplingParams, PARAM_NAMES};
use crate::encoders::{EncoderBackend, EncoderConfig, FrozenEncoders};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Preprocess};
use crate::metrics::{evaluate_scores, BinarizePolicy, MetricsReport, RunMeta};
use crate::model::{Gradients, Model, ModelConfig, PARAM_GROUPS};
use crate::prompt::PromptBank;
use crate::scalar::Scalar;
use crate::scoring::LossConfig;
use crate::seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    /// Validation cadence in epochs; 0 disables.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            warmup_lr: 0.0005,
            warmup_epochs: 1,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            momentum: 0.9,
            weight_decay: 0.0,
            hflip: true,
            validate_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return bad("lr and warmup_lr must be positive");
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return bad("epochs and batch_size must be >= 1");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay must be >= 0");
        }
        Ok(())
    }
}

/// Learning rate of `epoch` (0-based): `warmup_lr` during warmup, then
/// `lr * (1 + cos(pi * t / T)) / 2` with `t = epoch - warmup`, `T = epochs - warmup`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.warmup_lr);
    }
    let t = (epoch - cfg.warmup_epochs) as f64;
    let total = (cfg.epochs - cfg.warmup_epochs) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (PI * t / total).cos()))
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Horizontal flips augment pretrained runs only; synthetic patches are
    /// laid out on a grid that flipping would not preserve.
    pub fn flips_enabled(&self) -> bool {
        self.train.hflip && self.encoder.backend == EncoderBackend::Pretrained
    }

    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// SGD with momentum: `buf = mu * buf + g + wd * w`, `w -= lr * buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Gradients<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &mut Model<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        let buffers = model.zero_gradients();
        Self::with_buffers(model, momentum, weight_decay, buffers)
    }

    pub fn with_buffers(model: &mut Model<T>, momentum: f64, weight_decay: f64, buffers: Gradients<T>) -> Result<Self> {
        let mut groups: Vec<&str> = model.trainable_mut().iter().map(|(g, _, _)| *g).collect();
        groups.dedup();
        if groups != PARAM_GROUPS {
            return Err(Error::Config(format!("optimizer expects groups {PARAM_GROUPS:?}, found {groups:?}")));
        }
        let shapes_match = model
            .trainable_mut()
            .iter()
            .zip(buffers.tensors())
            .all(|((_, _, p), (_, _, b))| p.shape() == b.shape());
        if !shapes_match {
            return Err(Error::shape("momentum buffers do not match the trainable parameters"));
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffers,
        })
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let decay = self.weight_decay != 0.0;
        for (((_, _, mut w), (_, _, mut buf)), (_, _, g)) in model
            .trainable_mut()
            .into_iter()
            .zip(self.buffers.tensors_mut())
            .zip(grads.tensors())
        {
            ndarray::Zip::from(&mut w).and(&mut buf).and(&g).for_each(|w, b, &g| {
                let g = if decay { g + wd * *w } else { g };
                *b = mu * *b + g;
                *w -= lr * *b;
            });
        }
    }
}

/// Runs the preprocessing pipeline on one dataset image.
pub fn load_image<T: Scalar>(image: &ImageRef, preprocess: &Preprocess) -> Result<ImageTensor<T>> {
    match image {
        ImageRef::Path(path) => preprocess.load(path),
        ImageRef::Synthetic { spec, index } => {
            let img = spec.image::<T>(*index);
            if img.width() == preprocess.size && img.height() == preprocess.size {
                Ok(preprocess.normalize(&img))
            } else {
                Ok(preprocess.apply(&img.to_rgb()))
            }
        }
    }
}

/// Frozen-encoder features of every image, computed once. Valid because the
/// encoders never change during training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub positions: Vec<Array2<T>>,
    pub flipped: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn extract(model: &Model<T>, dataset: &DatasetIndex, with_flips: bool) -> Result<Self> {
        let preprocess = model.encoders.visual.preprocess().clone();
        let pairs = dataset
            .samples()
            .par_iter()
            .map(|s| {
                let img = load_image::<T>(&s.image, &preprocess)?;
                let plain = model.positions(&img)?;
                let flip = with_flips.then(|| model.positions(&img.flip_horizontal())).transpose()?;
                Ok((plain, flip))
            })
            .collect::<Result<Vec<_>>>()?;
        let (positions, flips): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Ok(Self {
            positions,
            flipped: with_flips.then(|| flips.into_iter().map(|f| f.expect("flip computed")).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "OF1")]
    pub of1: f64,
    #[serde(rename = "CF1")]
    pub cf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<EpochMetrics>,
}

/// Optional side outputs of [`Trainer::train`].
#[derive(Default)]
pub struct TrainHooks<'a, T> {
    /// Receives the checkpoint and JSON-lines log.
    pub out_dir: Option<PathBuf>,
    pub validation: Option<(&'a FeatureSet<T>, &'a [LabelVector])>,
    pub policy: BinarizePolicy,
}

/// Trainable state plus everything needed to rebuild the model. Encoder
/// weights are not included.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ExperimentConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub prompts: PromptBank<T>,
    pub params: DecouplingParams<T>,
    pub momentum: Gradients<T>,
    pub semantics: Array2<T>,
    pub adapter: ChannelAdapter<T>,
    pub temperature: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    epoch: usize,
    config_sha256: String,
    category_names: Vec<String>,
    config: ExperimentConfig,
    temperature: f64,
}

const CHECKPOINT_KIND: &str = "semprompt-checkpoint";

fn put<T: Scalar, D: ndarray::Dimension>(a: &mut Archive<T>, name: &str, t: ndarray::ArrayView<'_, T, D>) {
    a.insert(name, t.shape(), t.iter().copied().collect());
}

impl<T: Scalar> Checkpoint<T> {
    pub fn category_names(&self) -> &[String] {
        self.prompts.category_names()
    }

    pub fn to_archive(&self) -> Result<Archive<T>> {
        let mut a = Archive::new();
        for (c, name) in self.category_names().iter().enumerate() {
            put(&mut a, &format!("prompt.tokens.{name}"), self.prompts.tokens().index_axis(ndarray::Axis(0), c));
        }
        put(&mut a, "prompt.cls", self.prompts.cls_embeddings().view());
        for (name, t) in self.params.tensors() {
            put(&mut a, &format!("decoupling.{name}"), t);
        }
        for (group, name, t) in self.momentum.tensors() {
            put(&mut a, &format!("momentum.{group}.{name}"), t);
        }
        put(&mut a, "semantic", self.semantics.view());
        if let Some(w) = self.adapter.weight() {
            put(&mut a, "adapter", w.view());
        }
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            epoch: self.epoch,
            config_sha256: self.config.sha256(),
            category_names: self.category_names().to_vec(),
            config: self.config.clone(),
            temperature: self.temperature.to_f64().expect("finite"),
        };
        a.metadata = Some(serde_json::to_value(meta)?);
        Ok(a)
    }

    pub fn from_archive(mut a: Archive<T>) -> Result<Self> {
        let meta: CheckpointMeta = a
            .metadata
            .take()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("archive has no metadata".into()))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("unexpected archive kind {:?}", meta.kind)));
        }
        if meta.config.sha256() != meta.config_sha256 {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let names = meta.category_names;
        let mut rows = Vec::with_capacity(names.len());
        for name in &names {
            rows.push(a.take_array::<ndarray::Ix2>(&format!("prompt.tokens.{name}"))?);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let tokens = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let cls = a.take_array("prompt.cls")?;
        let prompts = PromptBank::from_parts(tokens, cls, names)?;
        let params = take_params(&mut a, "decoupling")?;
        let momentum = Gradients {
            prompt_tokens: a.take_array(&format!("momentum.{}.tokens", PARAM_GROUPS[0]))?,
            decoupling: take_params(&mut a, &format!("momentum.{}", PARAM_GROUPS[1]))?,
        };
        let semantics = a.take_array("semantic")?;
        let adapter = ChannelAdapter::from_weight(a.take_array("adapter").ok());
        if let Some(extra) = a.tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
        }
        Ok(Self {
            config: meta.config,
            epoch: meta.epoch,
            prompts,
            params,
            momentum,
            semantics,
            adapter,
            temperature: T::of(meta.temperature),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write then rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        self.to_archive()?.save(&tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }

    /// Rebuilds the frozen encoders from the stored config and assembles the model.
    pub fn into_model(self) -> Result<(Model<T>, Gradients<T>, ExperimentConfig, usize)> {
        let encoders = FrozenEncoders::build(&self.config.encoder, self.config.model.prompt_len)?;
        let model = Model::from_parts(encoders, self.semantics, self.adapter, self.params, self.prompts, self.config.loss, self.temperature)?;
        Ok((model, self.momentum, self.config, self.epoch))
    }
}

fn take_params<T: Scalar>(a: &mut Archive<T>, prefix: &str) -> Result<DecouplingParams<T>> {
    let mut get = |n: &str| a.take(&format!("{prefix}.{n}"))?.into_array();
    let [u, v, p, b, att_w, att_b, proj_w, proj_b] = PARAM_NAMES.map(|n| n);
    let two = |x: ndarray::ArrayD<T>| x.into_dimensionality::<ndarray::Ix2>().map_err(|e| Error::Checkpoint(e.to_string()));
    let one = |x: ndarray::ArrayD<T>| x.into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Checkpoint(e.to_string()));
    let params = DecouplingParams {
        u: two(get(u)?)?,
        v: two(get(v)?)?,
        p: two(get(p)?)?,
        b: one(get(b)?)?,
        att_w: one(get(att_w)?)?,
        att_b: one(get(att_b)?)?,
        proj_w: two(get(proj_w)?)?,
        proj_b: one(get(proj_b)?)?,
    };
    params.validate()?;
    Ok(params)
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
    pub config: ExperimentConfig,
    pub epochs_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: ExperimentConfig, category_names: &[String]) -> Result<Self> {
        config.validate()?;
        let mut model = Model::from_config(&config.encoder, &config.model, &config.loss, category_names)?;
        let optimizer = Sgd::new(&mut model, config.train.momentum, config.train.weight_decay)?;
        Ok(Self {
            model,
            optimizer,
            config,
            epochs_done: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let (mut model, momentum, config, epochs_done) = ckpt.into_model()?;
        let optimizer = Sgd::with_buffers(&mut model, config.train.momentum, config.train.weight_decay, momentum)?;
        Ok(Self {
            model,
            optimizer,
            config,
            epochs_done,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epochs_done,
            prompts: self.model.prompts.clone(),
            params: self.model.params.clone(),
            momentum: self.optimizer.buffers.clone(),
            semantics: self.model.semantics.clone(),
            adapter: self.model.adapter.clone(),
            temperature: self.model.temperature,
        }
    }

    /// One forward/backward/update. Parameters are left untouched when the
    /// loss or any gradient is non-finite.
    pub fn train_step(&mut self, batch: &[(ArrayView2<'_, T>, &LabelVector)], lr: f64, epoch: usize, step: usize) -> Result<T> {
        let (loss, grads) = self.model.loss_and_gradients(batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!(
                    "loss={loss:?}, max|grad|={:?}, lr={lr}, batch={}",
                    grads.max_abs(),
                    batch.len()
                ),
            });
        }
        self.optimizer.step(&mut self.model, &grads, lr);
        Ok(loss)
    }

    /// Runs the next epoch over `labels` (which may be partial).
    pub fn run_epoch(&mut self, features: &FeatureSet<T>, labels: &[LabelVector]) -> Result<EpochRecord> {
        let epoch = self.epochs_done;
        let cfg = self.config.train.clone();
        let lr = lr_at(epoch, &cfg)?;
        let mut rng = seed::rng(seed::child_seed(cfg.seed, 0x7a11_0000 + epoch as u64));
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let flips = if self.config.flips_enabled() { features.flipped.as_ref() } else { None };
        let (mut total, mut steps) = (0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(ArrayView2<'_, T>, &LabelVector)> = chunk
                .iter()
                .map(|&i| {
                    let src = match flips {
                        Some(f) if rng.gen_bool(0.5) => &f[i],
                        _ => &features.positions[i],
                    };
                    (src.view(), &labels[i])
                })
                .collect();
            let loss = self.train_step(&batch, lr, epoch, step)?;
            total += loss.to_f64().expect("finite loss");
            steps += 1;
        }
        self.epochs_done += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            loss: total / steps as f64,
            metrics: None,
        })
    }

    /// Runs the remaining epochs of the configured schedule.
    pub fn train(&mut self, features: &FeatureSet<T>, labels: &[LabelVector], hooks: &TrainHooks<'_, T>) -> Result<Vec<EpochRecord>> {
        if features.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!("{} feature rows for {} label rows", features.len(), labels.len())));
        }
        if labels.iter().all(|l| l.known_count() == 0) {
            return Err(Error::InvalidLabels("training labels contain no known entry".into()));
        }
        if self.config.flips_enabled() && features.flipped.is_none() {
            log::warn!("hflip requested but no flipped features were extracted; training without flips");
        }
        let mut log_file = match &hooks.out_dir {
            Some(dir) => {
                let path = dir.join(TRAIN_LOG_FILE);
                let file = if self.epochs_done == 0 {
                    File::create(&path)
                } else {
                    File::options().append(true).create(true).open(&path)
                };
                Some((BufWriter::new(file.map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let every = self.config.train.validate_every;
        let mut records = Vec::new();
        while self.epochs_done < self.config.train.epochs {
            let mut record = match self.run_epoch(features, labels) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = &hooks.out_dir {
                        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
                    }
                    return Err(e);
                }
            };
            let last = self.epochs_done == self.config.train.epochs;
            if let Some((vf, vl)) = hooks.validation {
                if every > 0 && (self.epochs_done.is_multiple_of(every) || last) {
                    let r = evaluate_features(&self.model, vf, vl, hooks.policy, RunMeta::default())?;
                    record.metrics = Some(EpochMetrics {
                        map: r.map,
                        of1: r.of1,
                        cf1: r.cf1,
                    });
                }
            }
            log::info!("epoch {} lr {:.3e} loss {:.6}", record.epoch, record.lr, record.loss);
            if let Some((w, path)) = &mut log_file {
                writeln!(w, "{}", serde_json::to_string(&record)?)
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = &hooks.out_dir {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
            records.push(record);
        }
        Ok(records)
    }
}

/// Trains from scratch on `dataset`, returning the final checkpoint and log.
pub fn train<T: Scalar>(dataset: &DatasetIndex, config: &ExperimentConfig) -> Result<(Checkpoint<T>, Vec<EpochRecord>)> {
    let mut trainer = Trainer::<T>::new(config.clone(), dataset.category_names())?;
    let features = FeatureSet::extract(&trainer.model, dataset, config.flips_enabled())?;
    let labels: Vec<LabelVector> = dataset.labels().cloned().collect();
    let log = trainer.train(&features, &labels, &TrainHooks::default())?;
    Ok((trainer.checkpoint(), log))
}

/// Metrics on precomputed features against complete labels.
pub fn evaluate_features<T: Scalar>(model: &Model<T>, features: &FeatureSet<T>, labels: &[LabelVector], policy: BinarizePolicy, meta: RunMeta) -> Result<MetricsReport> {
    let scores = model.score_batch(&features.positions)?;
    evaluate_scores(scores.view(), labels, policy, meta)
}

/// Full-dataset inference against a fully annotated dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &DatasetIndex, policy: BinarizePolicy, meta: RunMeta) -> Result<MetricsReport> {
    dataset.check_categories(model.category_names())?;
    if !dataset.is_fully_annotated() {
        return Err(Error::InvalidLabels("evaluation dataset must be fully annotated".into()));
    }
    let features = FeatureSet::extract(model, dataset, false)?;
    let labels: Vec<LabelVector> = dataset.labels().cloned().collect();
    evaluate_features(model, &features, &labels, policy, meta)
}

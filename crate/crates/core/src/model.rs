//! The full recognizer: frozen encoders and semantic vectors around the two
//! trainable groups (prompt tokens and decoupling parameters).

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelVector;
use crate::decoupling::{semantic_matrix, ChannelAdapter, DecoupleCache, DecouplingDims, DecouplingParams};
use crate::encoders::{EncoderConfig, FrozenEncoders, SemanticVector};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::prompt::PromptBank;
use crate::scalar::Scalar;
use crate::scoring::{sample_terms, LossConfig, ScoreForward};
use crate::seed;

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// summation order never depends on the thread pool.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Learnable tokens per category.
    pub prompt_len: usize,
    pub joint_dim: usize,
    pub fused_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_len: 16,
            joint_dim: 1024,
            fused_dim: 1024,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.joint_dim == 0 || self.fused_dim == 0 {
            return Err(Error::Config("prompt_len, joint_dim and fused_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn decoupling_dims(&self, channels: usize, semantic_dim: usize, text_dim: usize) -> DecouplingDims {
        DecouplingDims {
            channels,
            semantic_dim,
            joint_dim: self.joint_dim,
            fused_dim: self.fused_dim,
            text_dim,
        }
    }

    fn adapter_seed(&self) -> u64 {
        seed::child_seed(self.seed, 2)
    }
}

/// Gradients (or momentum buffers) for the two trainable groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub prompt_tokens: Array3<T>,
    pub decoupling: DecouplingParams<T>,
}

/// Names of the optimizer's parameter groups, in order.
pub const PARAM_GROUPS: [&str; 2] = ["prompt_tokens", "decoupling"];

impl<T: Scalar> Gradients<T> {
    pub fn zeros(prompt_shape: (usize, usize, usize), dims: &DecouplingDims) -> Self {
        Self {
            prompt_tokens: Array3::zeros(prompt_shape),
            decoupling: DecouplingParams::zeros(dims),
        }
    }

    /// Flat `(group, name, tensor)` listing.
    pub fn tensors(&self) -> Vec<(&'static str, &'static str, ArrayViewD<'_, T>)> {
        let mut out = vec![(PARAM_GROUPS[0], "tokens", self.prompt_tokens.view().into_dyn())];
        out.extend(self.decoupling.tensors().into_iter().map(|(n, t)| (PARAM_GROUPS[1], n, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &'static str, ArrayViewMutD<'_, T>)> {
        let mut out = vec![(PARAM_GROUPS[0], "tokens", self.prompt_tokens.view_mut().into_dyn())];
        out.extend(self.decoupling.tensors_mut().into_iter().map(|(n, t)| (PARAM_GROUPS[1], n, t)));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter().copied())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Per-image inference output.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub scores: Array1<T>,
    /// `(C, W*H)` spatial softmax coefficients, row index `w*H + h`.
    pub attention: Array2<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
}

impl ParameterBreakdown {
    pub fn new(dims: &DecouplingDims, categories: usize, prompt_len: usize) -> Self {
        let d = dims;
        let entries = vec![
            ("U".to_string(), d.channels * d.joint_dim),
            ("V".to_string(), d.semantic_dim * d.joint_dim),
            ("P".to_string(), d.joint_dim * d.fused_dim),
            ("b".to_string(), d.fused_dim),
            ("att".to_string(), d.fused_dim + 1),
            ("proj".to_string(), d.fused_dim * d.text_dim + d.text_dim),
            ("prompts".to_string(), categories * prompt_len * d.text_dim),
        ];
        let total = entries.iter().map(|(_, n)| n).sum();
        Self { entries, total }
    }
}

impl std::fmt::Display for ParameterBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, n) in &self.entries {
            writeln!(f, "{name:>8}: {n:>10}")?;
        }
        write!(f, "{:>8}: {:>10}", "total", self.total)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub encoders: FrozenEncoders<T>,
    /// `(C, D)` word vectors, frozen.
    pub semantics: Array2<T>,
    pub adapter: ChannelAdapter<T>,
    pub params: DecouplingParams<T>,
    pub prompts: PromptBank<T>,
    pub loss: LossConfig,
    pub temperature: T,
}

impl<T: Scalar> Model<T> {
    /// Fresh model from configuration: builds the encoders, looks up the word
    /// vectors and initializes both trainable groups from `model.seed`.
    pub fn from_config(encoder: &EncoderConfig, model: &ModelConfig, loss: &LossConfig, category_names: &[String]) -> Result<Self> {
        model.validate()?;
        loss.validate()?;
        let encoders = FrozenEncoders::build(encoder, model.prompt_len)?;
        let source = encoder.semantic_source(category_names)?;
        let vectors = category_names
            .iter()
            .map(|n| source.semantic_embedding(n))
            .collect::<Result<Vec<SemanticVector<T>>>>()?;
        let semantics = semantic_matrix(&vectors)?;
        let dims = model.decoupling_dims(encoders.visual.channels(), semantics.ncols(), encoders.text.dim());
        let params = DecouplingParams::init(&dims, model.seed);
        let prompts = PromptBank::init(category_names, model.prompt_len, &encoders.text, seed::child_seed(model.seed, 1))?;
        let adapter = ChannelAdapter::for_dims(dims.channels, dims.fused_dim, model.adapter_seed());
        let temperature = T::of(loss.resolve_temperature(encoders.temperature));
        Self::from_parts(encoders, semantics, adapter, params, prompts, *loss, temperature)
    }

    pub fn from_parts(
        encoders: FrozenEncoders<T>,
        semantics: Array2<T>,
        adapter: ChannelAdapter<T>,
        params: DecouplingParams<T>,
        prompts: PromptBank<T>,
        loss: LossConfig,
        temperature: T,
    ) -> Result<Self> {
        params.validate()?;
        let d = params.dims();
        let shape = prompts.shape();
        if d.channels != encoders.visual.channels()
            || d.semantic_dim != semantics.ncols()
            || semantics.nrows() != shape.categories
            || d.text_dim != shape.dim
            || encoders.text.dim() != shape.dim
            || encoders.text.seq_len() != shape.prompt_len + 1
        {
            return Err(Error::shape(format!(
                "inconsistent model parts: decoupling {d:?}, prompts {shape:?}, semantics {:?}, visual channels {}",
                semantics.dim(),
                encoders.visual.channels()
            )));
        }
        match adapter.weight() {
            Some(w) if w.dim() != (d.channels, d.fused_dim) => {
                return Err(Error::shape(format!("channel adapter {:?}", w.dim())));
            }
            None if d.channels != d.fused_dim => {
                return Err(Error::shape("channel adapter missing for differing dimensions"));
            }
            _ => {}
        }
        if !(temperature > T::zero()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(Self {
            encoders,
            semantics,
            adapter,
            params,
            prompts,
            loss,
            temperature,
        })
    }

    pub fn category_names(&self) -> &[String] {
        self.prompts.category_names()
    }

    pub fn num_categories(&self) -> usize {
        self.semantics.nrows()
    }

    pub fn parameter_breakdown(&self) -> ParameterBreakdown {
        let s = self.prompts.shape();
        ParameterBreakdown::new(&self.params.dims(), s.categories, s.prompt_len)
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_parameters() + self.prompts.num_parameters()
    }

    /// The trainable tensors, grouped as [`PARAM_GROUPS`].
    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &'static str, ArrayViewMutD<'_, T>)> {
        let mut out = vec![(PARAM_GROUPS[0], "tokens", self.prompts.tokens_mut().view_mut().into_dyn())];
        out.extend(self.params.tensors_mut().into_iter().map(|(n, t)| (PARAM_GROUPS[1], n, t)));
        out
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients::zeros(self.prompts.tokens().dim(), &self.params.dims())
    }

    /// `(W*H, N_ch)` per-position features of a preprocessed image.
    pub fn positions(&self, image: &ImageTensor<T>) -> Result<Array2<T>> {
        Ok(self.encoders.visual.encode_image(image)?.positions())
    }

    /// `(C, d_t)` text embeddings of the current prompts.
    pub fn text_embeddings(&self) -> Result<Array2<T>> {
        self.prompts.encode_all(&self.encoders.text)
    }

    fn joint_semantics(&self) -> Array2<T> {
        self.semantics.dot(&self.params.v)
    }

    pub fn infer_with(&self, text: ArrayView2<'_, T>, joint_sem: ArrayView2<'_, T>, positions: ArrayView2<'_, T>) -> Result<Inference<T>> {
        let cache = DecoupleCache::forward(positions, joint_sem, &self.params, &self.adapter)?;
        let sf = ScoreForward::new(cache.features.view(), text, self.temperature)?;
        Ok(Inference {
            scores: sf.scores,
            attention: cache.attention,
        })
    }

    pub fn infer(&self, positions: ArrayView2<'_, T>) -> Result<Inference<T>> {
        self.infer_with(self.text_embeddings()?.view(), self.joint_semantics().view(), positions)
    }

    /// `(N, C)` scores for precomputed position features.
    pub fn score_batch(&self, positions: &[Array2<T>]) -> Result<Array2<T>> {
        let text = self.text_embeddings()?;
        let joint_sem = self.joint_semantics();
        let rows = positions
            .par_iter()
            .map(|p| self.infer_with(text.view(), joint_sem.view(), p.view()).map(|i| i.scores))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros((rows.len(), self.num_categories()));
        for (mut dst, r) in out.rows_mut().into_iter().zip(&rows) {
            dst.assign(r);
        }
        Ok(out)
    }

    pub fn loss(&self, batch: &[(ArrayView2<'_, T>, &LabelVector)]) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let text = self.text_embeddings()?;
        let joint_sem = self.joint_semantics();
        let mut acc = T::zero();
        for (pos, labels) in batch {
            let inf = self.infer_with(text.view(), joint_sem.view(), *pos)?;
            acc += sample_terms(inf.scores.view(), labels, &self.loss)?.0;
        }
        Ok(-acc / T::of(batch.len() as f64))
    }

    /// Batch loss `-(1/N) sum_n sum_c term` and its gradient for both trainable groups.
    pub fn loss_and_gradients(&self, batch: &[(ArrayView2<'_, T>, &LabelVector)]) -> Result<(T, Gradients<T>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let text = self.text_embeddings()?;
        let joint_sem = self.joint_semantics();
        let dims = self.params.dims();
        let (c, d_j, d_t) = (self.num_categories(), dims.joint_dim, dims.text_dim);
        let scale = -T::of(batch.len() as f64).recip();

        struct Partial<T> {
            terms: T,
            decoupling: DecouplingParams<T>,
            sem: Array2<T>,
            text: Array2<T>,
        }

        let partials = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| -> Result<Partial<T>> {
                let mut part = Partial {
                    terms: T::zero(),
                    decoupling: DecouplingParams::zeros(&dims),
                    sem: Array2::zeros((c, d_j)),
                    text: Array2::zeros((c, d_t)),
                };
                for (pos, labels) in chunk {
                    if labels.len() != c {
                        return Err(Error::shape(format!("label length {} for {c} categories", labels.len())));
                    }
                    if labels.known_count() == 0 {
                        continue;
                    }
                    let cache = DecoupleCache::forward(*pos, joint_sem.view(), &self.params, &self.adapter)?;
                    let sf = ScoreForward::new(cache.features.view(), text.view(), self.temperature)?;
                    let (terms, dterms) = sample_terms(sf.scores.view(), labels, &self.loss)?;
                    part.terms += terms;
                    let grad_scores = dterms * scale;
                    let (gv, gt) = sf.backward(cache.features.view(), text.view(), grad_scores.view());
                    part.text += &gt;
                    part.sem += &cache.backward(*pos, joint_sem.view(), &self.params, &self.adapter, gv.view(), &mut part.decoupling);
                }
                Ok(part)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut iter = partials.into_iter();
        let mut total = iter.next().expect("nonempty batch");
        for p in iter {
            total.terms += p.terms;
            total.decoupling.add_assign(&p.decoupling);
            total.sem += &p.sem;
            total.text += &p.text;
        }
        let mut decoupling = total.decoupling;
        decoupling.v += &self.semantics.t().dot(&total.sem);
        let prompt_tokens = self.prompts.backward(&self.encoders.text, &text, total.text.view());
        Ok((total.terms * scale, Gradients { prompt_tokens, decoupling }))
    }
}

//! Frozen prompt encoder: mean-pooled token vectors through an affine map and
//! `tanh`. Differentiable with respect to its input tokens only.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::seed;
use super::WeightVisitor;

/// Output of the text encoder for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    data: Array1<T>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn new(data: Array1<T>) -> Result<Self> {
        let norm_sq = data.dot(&data);
        if !(norm_sq > T::zero()) || !norm_sq.is_finite() {
            return Err(Error::ZeroNorm("text embedding".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array1<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array1<T> {
        self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder<T> {
    /// `(d_t, d_t)`; output is `tanh(mean_tokens . weight + bias)`.
    weight: Array2<T>,
    bias: Array1<T>,
    seq_len: usize,
    token_seed: u64,
}

/// Standard deviation of hashed token embeddings.
pub const TOKEN_EMBEDDING_STD: f64 = 0.02;

impl<T: Scalar> TextEncoder<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>, seq_len: usize, token_seed: u64) -> Result<Self> {
        let (rows, cols) = weight.dim();
        if rows != cols || bias.len() != cols || seq_len < 2 {
            return Err(Error::shape(format!(
                "text encoder weight {rows}x{cols}, bias {}, sequence length {seq_len}",
                bias.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            seq_len,
            token_seed,
        })
    }

    /// Fixed random head; `prompt_len` learnable tokens plus the class token.
    pub fn synthetic(seed: u64, dim: usize, prompt_len: usize) -> Result<Self> {
        let mut rng = seed::rng(seed::child_seed(seed, 0x7e47_0001));
        // A strong head and a fixed offset stand in for the frozen context a
        // pretrained encoder adds to every prompt. Without the offset the
        // cosine score is invariant to token scale and learning stalls.
        let weight = init::kaiming_uniform(&mut rng, (dim, dim), dim, 10.0);
        let bias = init::uniform(&mut rng, dim, 0.5);
        Self::new(weight, bias, prompt_len + 1, seed)
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn with_seq_len(mut self, seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::invalid("prompt needs at least one learnable token"));
        }
        self.seq_len = seq_len;
        Ok(self)
    }

    /// Embedding of a single vocabulary token, derived from a hash of the word.
    pub fn token_embedding(&self, word: &str) -> Array1<T> {
        let s = seed::hash_seed("token", &format!("{}:{}", self.token_seed, word.to_lowercase()));
        init::gaussian(&mut seed::rng(s), self.dim(), TOKEN_EMBEDDING_STD)
    }

    /// Class-name token. Names spanning several tokens use the first one.
    pub fn class_token(&self, name: &str) -> Array1<T> {
        let words: Vec<&str> = name
            .split_whitespace()
            .collect();
        if words.len() > 1 {
            log::info!("class name {name:?} spans {} tokens; using {:?}", words.len(), words[0]);
        }
        self.token_embedding(words.first().copied().unwrap_or(name))
    }

    fn check(&self, len: usize, dim: usize) -> Result<()> {
        if len != self.seq_len || dim != self.dim() {
            return Err(Error::shape(format!(
                "prompt is {len}x{dim}, encoder expects {}x{}",
                self.seq_len,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Encodes one `(seq_len, d_t)` token sequence.
    pub fn encode_prompt(&self, tokens: ArrayView2<'_, T>) -> Result<TextEmbedding<T>> {
        let (len, dim) = tokens.dim();
        self.check(len, dim)?;
        let pooled = tokens.mean_axis(Axis(0)).expect("nonempty prompt");
        TextEmbedding::new((pooled.dot(&self.weight) + &self.bias).mapv(T::tanh))
    }

    /// Encodes `(C, seq_len, d_t)` prompts in one pass, giving `(C, d_t)`.
    pub fn encode_batch(&self, prompts: ArrayView3<'_, T>) -> Result<Array2<T>> {
        let (_, len, dim) = prompts.dim();
        self.check(len, dim)?;
        let pooled = prompts.mean_axis(Axis(1)).expect("nonempty prompt");
        let out = (pooled.dot(&self.weight) + &self.bias).mapv(T::tanh);
        for (c, row) in out.outer_iter().enumerate() {
            if !(row.dot(&row) > T::zero()) {
                return Err(Error::ZeroNorm(format!("text embedding of category {c}")));
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product of [`TextEncoder::encode_batch`]: gradient with
    /// respect to every input token given `grad_out` of shape `(C, d_t)`.
    pub fn backward_batch(&self, outputs: &Array2<T>, grad_out: &Array2<T>) -> Array3<T> {
        let (c, dim) = outputs.dim();
        let pre = grad_out * &outputs.mapv(|y| T::one() - y * y);
        let pooled_grad = pre.dot(&self.weight.t()) / T::of(self.seq_len as f64);
        let mut out = Array3::zeros((c, self.seq_len, dim));
        for (mut block, g) in out.outer_iter_mut().zip(pooled_grad.outer_iter()) {
            for mut row in block.outer_iter_mut() {
                row.assign(&g);
            }
        }
        out
    }

    pub(crate) fn visit_weights(&self, f: &mut WeightVisitor<'_, T>) {
        f("text.weight", self.weight.shape(), self.weight.iter().copied().collect());
        f("text.bias", self.bias.shape(), self.bias.to_vec());
    }
}

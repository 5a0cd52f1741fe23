//! Category-specific learnable prompts: `M` free token vectors per category,
//! followed by the fixed class-name token.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::seed;

/// Standard deviation of the initial prompt tokens.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank<T> {
    /// `(C, M, d_t)`, trainable.
    tokens: Array3<T>,
    /// `(C, d_t)`, fixed.
    cls: Array2<T>,
    category_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptShape {
    pub categories: usize,
    pub prompt_len: usize,
    pub dim: usize,
}

impl<T: Scalar> PromptBank<T> {
    /// Gaussian tokens drawn independently per category; class tokens come from
    /// the text encoder's token embedding of each name.
    pub fn init(category_names: &[String], prompt_len: usize, text: &TextEncoder<T>, seed: u64) -> Result<Self> {
        if category_names.is_empty() || prompt_len < 1 {
            return Err(Error::invalid("prompt bank needs C >= 1 and M >= 1"));
        }
        let (c, d) = (category_names.len(), text.dim());
        let mut rng = seed::rng(seed::child_seed(seed, 0x9909_0001));
        let tokens = init::gaussian(&mut rng, (c, prompt_len, d), PROMPT_INIT_STD);
        let mut cls = Array2::zeros((c, d));
        for (i, name) in category_names.iter().enumerate() {
            cls.row_mut(i).assign(&text.class_token(name));
        }
        Self::from_parts(tokens, cls, category_names.to_vec())
    }

    pub fn from_parts(tokens: Array3<T>, cls: Array2<T>, category_names: Vec<String>) -> Result<Self> {
        let (c, m, d) = tokens.dim();
        if cls.dim() != (c, d) || category_names.len() != c || m == 0 {
            return Err(Error::shape(format!(
                "prompt tokens {:?}, class tokens {:?}, {} names",
                tokens.dim(),
                cls.dim(),
                category_names.len()
            )));
        }
        Ok(Self {
            tokens,
            cls,
            category_names,
        })
    }

    pub fn shape(&self) -> PromptShape {
        let (categories, prompt_len, dim) = self.tokens.dim();
        PromptShape {
            categories,
            prompt_len,
            dim,
        }
    }

    pub fn tokens(&self) -> &Array3<T> {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Array3<T> {
        &mut self.tokens
    }

    pub fn cls_embeddings(&self) -> &Array2<T> {
        &self.cls
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn num_parameters(&self) -> usize {
        self.tokens.len()
    }

    /// `[V]_c^1 ... [V]_c^M [CLS]_c` as an `(M + 1, d_t)` matrix.
    pub fn compose_prompt(&self, c: usize) -> Result<Array2<T>> {
        let shape = self.shape();
        if c >= shape.categories {
            return Err(Error::invalid(format!(
                "category {c} out of range for {} prompts",
                shape.categories
            )));
        }
        let mut out = Array2::zeros((shape.prompt_len + 1, shape.dim));
        out.slice_mut(s![..shape.prompt_len, ..]).assign(&self.tokens.index_axis(Axis(0), c));
        out.row_mut(shape.prompt_len).assign(&self.cls.row(c));
        Ok(out)
    }

    /// All composed prompts, `(C, M + 1, d_t)`.
    pub fn compose_all(&self) -> Array3<T> {
        let shape = self.shape();
        let mut out = Array3::zeros((shape.categories, shape.prompt_len + 1, shape.dim));
        out.slice_mut(s![.., ..shape.prompt_len, ..]).assign(&self.tokens);
        out.slice_mut(s![.., shape.prompt_len, ..]).assign(&self.cls);
        out
    }

    /// Text embedding of every category in one batched encoder call, `(C, d_t)`.
    pub fn encode_all(&self, text: &TextEncoder<T>) -> Result<Array2<T>> {
        if text.dim() != self.shape().dim {
            return Err(Error::shape(format!(
                "text encoder dimension {} differs from prompt dimension {}",
                text.dim(),
                self.shape().dim
            )));
        }
        text.encode_batch(self.compose_all().view())
    }

    /// Gradient for the learnable tokens given the encoder outputs and
    /// `dL/d(text embeddings)`. The class-token slice is dropped.
    pub fn backward(&self, text: &TextEncoder<T>, outputs: &Array2<T>, grad_out: ArrayView2<'_, T>) -> Array3<T> {
        let full = text.backward_batch(outputs, &grad_out.to_owned());
        full.slice(s![.., ..self.shape().prompt_len, ..]).to_owned()
    }
}

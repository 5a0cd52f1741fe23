//! Multi-label image recognition from partially annotated data.
//!
//! Frozen visual and text encoders surround two small trainable pieces: a
//! semantic-guided attention module that pulls one feature per category out
//! of the shared feature map, and a learnable prompt per category that the
//! text encoder turns into a classifier vector. All numeric code is generic
//! over [`Scalar`] (`f32` or `f64`); the aliases at the bottom fix one.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0)` also rejects NaN

pub mod archive;
pub mod cam;
pub mod data;
pub mod decoupling;
pub mod encoders;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod prompt;
mod init;
pub mod scalar;
pub mod scoring;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub use model::{Model, ModelConfig};

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type DecouplingParams32 = decoupling::DecouplingParams<f32>;
pub type DecouplingParams64 = decoupling::DecouplingParams<f64>;
pub type PromptBank32 = prompt::PromptBank<f32>;
pub type PromptBank64 = prompt::PromptBank<f64>;

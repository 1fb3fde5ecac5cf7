//! Unified visual tokenizer at desk scale: a small autodiff engine, a frozen
//! invertible codec, a ViT tokenizer with reconstruction and understanding
//! branches, the training loop and evaluation metrics.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

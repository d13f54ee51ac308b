//! Global-local alignment of images and long captions.
//!
//! The crate is organized as a pipeline:
//!
//! - [`datagen`]: synthetic scenes with templated long captions and known
//!   object/sentence correspondence, plus the line-delimited manifest format.
//! - [`encoders`]: a miniature dual encoder (vision transformer + causal text
//!   transformer) exposing CLS, patch and sequence tokens, the word-level
//!   tokenizer, positional-table interpolation and token PCA.
//! - [`flism`]: region proposal, sentence/region CLS matching and local pair
//!   selection.
//! - [`alignment`]: token selection, pooling, projection heads and the
//!   global/local contrastive and token-similarity losses.
//! - [`trainer`]: deterministic AdamW fine-tuning, checkpoints and gradient
//!   verification.
//! - [`evalkit`]: Recall@K retrieval evaluation and attention heat maps.

pub mod alignment;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod flism;
pub mod image_ops;
pub mod trainer;

pub use error::{Error, Result};

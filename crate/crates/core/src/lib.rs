//! Priority inference for bug reports: a byte-level BPE tokenizer, a stacked
//! Transformer encoder trained from scratch on a small reverse-mode autodiff
//! engine, masked-language-model and contrastive pre-training, and a
//! mean-pooled softmax classifier with weighted evaluation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod mlm;
pub mod model;
pub mod pipeline;
pub mod tokenizer;

pub use error::{Error, Result};

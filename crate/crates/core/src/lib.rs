//! Multimodal sequence model for electronic health records.
//!
//! Irregular vital-sign streams are tokenized with non-unique positional
//! indices, encoded with sliding-window attention, fused with clinical-note
//! embeddings by cross-attention and aligned with discharge-summary
//! embeddings by a contrastive objective.

pub mod cohort;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

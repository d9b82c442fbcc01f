//! Sentence-order pre-training toolkit.
//!
//! The pipeline runs corpus ingestion, vocabulary building, pair sampling
//! with masked-LM corruption, a small transformer encoder trained with
//! AdamW, and evaluation probes that measure order sensitivity.
//!
//! ```text
//! corpus -> tokenizer -> sampler -> model/train -> eval
//! ```

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

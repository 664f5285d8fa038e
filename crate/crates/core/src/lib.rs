//! Collaborative cross-modal fusion for click-through-rate prediction.
//!
//! Collaborative-filtering embeddings are aligned into the input space of a
//! small causal transformer and gate-fused with the token embeddings of item
//! titles inside a hybrid prompt. The model is scored by the probability mass
//! it puts on "yes" versus "no" after the prompt.

pub mod dataset;
pub mod experiment;
pub mod export;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod metrics;
pub mod cf;
pub mod config;
pub mod params;
pub mod prompt;
pub mod tensor;
pub mod trainer;

pub use error::{CcfError, Result};

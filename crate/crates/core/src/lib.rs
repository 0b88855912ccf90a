//! Irregular multimodal sequence models for clinical-style prediction.
//!
//! Numeric series are embedded twice (hourly imputation + causal conv, and
//! multi-time attention over Time2Vec embeddings) and mixed by a learned
//! gate; note embeddings are interpolated onto the same reference grid by
//! their own time attention; the two streams are fused by interleaved
//! self/cross attention layers.

// `!(x > 0.0)` is used on purpose so NaN fails validation; tensor
// arithmetic is fallible, so it cannot implement the operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod mtand;
pub mod nn;
pub mod tde;
pub mod tensor;
pub mod utde;

pub use error::{ConfigError, DataError, Error, MetricError, Result, TensorError};

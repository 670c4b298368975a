//! Parameter-efficient adaptation of a small transformer encoder for binary
//! report classification: full fine-tuning, deep prompt tuning, and an
//! attention-weighted mixture of frozen source-task prompts.

pub mod adaptation;
pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mixture;
pub mod params;
pub mod pretrain;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};

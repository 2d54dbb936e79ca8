//! Small decoder-only language models trained under scheduled
//! attention-distance penalties, with minimal-pair evaluation and
//! embedding-space diagnostics.

pub mod analysis;
pub mod attention_bias;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

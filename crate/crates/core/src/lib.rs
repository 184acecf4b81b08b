//! Patch-transformer stress classifiers for single-channel physiological
//! signals, with same-modality and cross-modality evaluation and
//! embedding-space analytics.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{ModelConfig, Transformer};
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};

//! Crossed co-attention networks for sequence-to-sequence translation.
//!
//! The crate contains a small reverse-mode tensor engine, attention and
//! co-attention primitives, the two-branch encoder-decoder and a Transformer
//! baseline, a corpus pipeline with BPE and token-swap corruption, a training
//! loop with checkpoints, and BLEU-based evaluation.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Arch, Checkpoint, Model, ModelConfig};
pub use rng::Rng;
pub use tensor::Tensor;

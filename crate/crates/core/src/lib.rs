//! Convolutional sentence classification with a per-region attention layer,
//! two-mode transfer learning and attention-based word attribution.
//!
//! Module map:
//!
//! - [`numerics`]: dense matrices, activations, softmax, seeded RNG, dropout.
//! - [`corpus`]: tokenizer, vocabulary, TSV datasets, fixed-length encoding.
//! - [`embeddings`]: pretrained vector loading and multi-channel tables.
//! - [`model`]: convolution, attention, pooling, dense softmax, gradients,
//!   checkpoints.
//! - [`training`]: loss, SGD / ADADELTA, training loop, evaluation protocols,
//!   hyperparameter sweeps.
//! - [`transfer`]: direct and incremental transfer to a target domain.
//! - [`explain`]: token attribution from attention weights and per-word
//!   weight distributions.
//! - [`cli`]: the `attncnn` command-line front end.

pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod explain;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};

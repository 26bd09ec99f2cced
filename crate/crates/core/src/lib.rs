//! Two-stream vision-language encoder-decoder trained from scratch on a
//! synthetic micro-world.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with a tape-style reverse-mode autodiff graph
//!   and finite-difference gradient checking.
//! - [`model`]: object and sentence encoders plus the multi-modal decoder.
//! - [`proxy`]: mask planning and the five pre-training objectives.
//! - [`data`]: the synthetic corpus generator, vocabulary, file formats and
//!   batching.
//! - [`train`]: Adam, the pre-training loop and checkpointing.
//! - [`downstream`]: question answering, retrieval and captioning fine-tunes
//!   with their metrics.
//! - [`config`] and [`cli`]: flat run configuration and the `vlp` command.

pub mod error;
pub mod cli;
pub mod config;
pub mod data;
pub mod downstream;
pub mod model;
pub mod proxy;
pub mod scalar;
pub mod study;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

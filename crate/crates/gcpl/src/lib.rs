//! Generative class-prompt learning at desk scale.
//!
//! Learns per-class conditioning embeddings by gradient descent through a
//! frozen conditional denoiser, classifies by Monte-Carlo estimation of
//! conditional noise-prediction error, and benchmarks the pipeline on an
//! episodic few-shot harness over synthetic latent datasets.

pub mod classifier;
pub mod commands;
pub mod config;
pub mod denoiser;
pub mod error;
mod format;
pub mod harness;
pub mod optim;
pub mod plot;
pub mod prompt;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};

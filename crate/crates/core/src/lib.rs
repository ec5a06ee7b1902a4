//! A small retrieval-augmented encoder-decoder: BM25 retrieval over a corpus,
//! a perceiver resampler that compresses each retrieved document to a fixed
//! number of latents, and a gated cross-attention block that fuses them into
//! the encoded prompt before decoding.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod train;

mod io_util;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use pipeline::Experiment;
pub use fusion::{FusionConfig, Strategy};
pub use model::{Model, ModelInput};
pub use nn::ModelConfig;

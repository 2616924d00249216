//! Part-level sub-concept discovery, token learning under an attention
//! disentangling loss, and composition of hybrid concepts.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file pick the precision used by the command line.

pub mod autodiff;
pub mod checkpoint;
pub mod composition;
pub mod denoiser;
pub mod discovery;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod feature_io;
pub mod kmeans;
pub mod losses;
pub mod manifest;
pub mod optim;
pub mod psfm;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod token_space;
pub mod toy_task;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used by the command line and the service.
pub type Real = f32;
pub type RealTensor = tensor::Tensor<Real>;
pub type RealDenoiser = denoiser::ToyDenoiser<Real>;
pub type RealTrainer = training::Trainer<Real>;
pub type RealModel = training::TrainedModel<Real>;
pub type RealPrompt = token_space::PromptEmbedding<Real>;

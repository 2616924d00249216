//! Denoiser backends: the shared interface, the bundled toy cross-attention
//! model with low-rank adapters, and a client for remote services.

pub mod autoencoder;
pub mod remote;
pub mod schedule;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::AttentionStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::token_space::PromptEmbedding;

pub use autoencoder::PatchAutoencoder;
pub use remote::RemoteBackend;
pub use schedule::NoiseSchedule;
pub use toy::{LoraAdapter, ToyConfig, ToyDenoiser};

/// What a backend declares about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Wire-protocol versions the backend speaks.
    pub versions: Vec<u32>,
    pub latent_cells: usize,
    pub latent_channels: usize,
    /// Attention grid `(h, w)`.
    pub grid: (usize, usize),
    /// Width of prompt token vectors.
    pub context_dim: usize,
    pub timesteps: usize,
    /// Names of the layers whose cross-attention is returned. Empty when the
    /// backend cannot expose attention.
    pub taps: Vec<String>,
}

impl Capabilities {
    pub fn latent_shape(&self) -> (usize, usize) {
        (self.latent_cells, self.latent_channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction<T> {
    pub eps: Tensor<T>,
    /// Raw attention at the pseudo-token positions, one layer per tap.
    pub attention: Option<AttentionStack<T>>,
}

pub trait DenoiserBackend<T: Scalar>: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding<T>) -> Result<NoisePrediction<T>>;
}

/// Check a latent and prompt against a backend declaration.
pub fn check_inputs<T: Scalar>(caps: &Capabilities, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding<T>) -> Result<()> {
    use crate::error::validation;
    if z_t.shape() != caps.latent_shape() {
        return Err(validation(format!(
            "latent is {:?}, backend expects {:?}",
            z_t.shape(),
            caps.latent_shape()
        )));
    }
    if t >= caps.timesteps {
        return Err(validation(format!("timestep {t} outside 0..{}", caps.timesteps)));
    }
    if prompt.vectors.cols() != caps.context_dim {
        return Err(validation(format!(
            "prompt vectors have width {}, backend expects {}",
            prompt.vectors.cols(),
            caps.context_dim
        )));
    }
    if prompt.positions.len() != prompt.channels.len()
        || prompt.positions.iter().any(|&p| p >= prompt.vectors.rows())
        || prompt.channels.iter().any(|&m| m >= prompt.num_channels)
        || prompt.channels.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(validation("prompt pseudo-token layout is inconsistent"));
    }
    Ok(())
}

/// Where inference-time noise predictions come from: the trained local
/// model, or a remote service fed with the same prompt embeddings.
#[derive(Debug, Clone)]
pub enum InferenceBackend<T> {
    Local(ToyDenoiser<T>),
    Remote(RemoteBackend),
}

impl<T: Scalar> InferenceBackend<T> {
    pub fn name(&self) -> String {
        match self {
            Self::Local(_) => "toy".into(),
            Self::Remote(r) => format!("remote:{}", r.endpoint()),
        }
    }

    /// Cheap liveness probe; local models are always ready.
    pub fn ready(&self) -> Result<()> {
        match self {
            Self::Local(_) => Ok(()),
            Self::Remote(r) => r.ping(),
        }
    }

    /// The remote side must accept the local prompt width and latent shape.
    pub fn check_matches(&self, local: &Capabilities) -> Result<()> {
        let caps = self.capabilities();
        if caps.context_dim != local.context_dim || caps.latent_shape() != local.latent_shape() || caps.grid != local.grid {
            return Err(crate::error::validation(format!(
                "backend declares context width {} and latent {:?} on grid {:?}, the model needs {} and {:?} on {:?}",
                caps.context_dim,
                caps.latent_shape(),
                caps.grid,
                local.context_dim,
                local.latent_shape(),
                local.grid
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> DenoiserBackend<T> for InferenceBackend<T> {
    fn capabilities(&self) -> Capabilities {
        match self {
            Self::Local(b) => b.capabilities(),
            Self::Remote(r) => DenoiserBackend::<T>::capabilities(r),
        }
    }

    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding<T>) -> Result<NoisePrediction<T>> {
        match self {
            Self::Local(b) => b.predict_noise(z_t, t, prompt),
            Self::Remote(r) => r.predict_noise(z_t, t, prompt),
        }
    }
}

//! HTTP client for a denoiser served elsewhere.
//!
//! Control messages are JSON; tensors travel as base64-encoded PSFM blocks.
//! `GET /v1/capabilities` returns [`Capabilities`], and
//! `POST /v1/predict_noise` takes a [`PredictRequest`] and answers with a
//! [`PredictResponse`].

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{check_inputs, Capabilities, DenoiserBackend, NoisePrediction};
use crate::error::{Error, Result};
use crate::losses::AttentionStack;
use crate::psfm::{self, Block};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::token_space::PromptEmbedding;

/// Protocol versions this client speaks.
pub const CLIENT_VERSIONS: &[u32] = &[1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub version: u32,
    pub t: usize,
    /// `cells × channels` matrix.
    pub z_t: String,
    /// `tokens × width` matrix.
    pub prompt: String,
    pub positions: Vec<usize>,
    pub channels: Vec<usize>,
    pub num_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub eps: String,
    /// `layers × num_channels × cells` block.
    #[serde(default)]
    pub attention: Option<String>,
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> String {
    let data = t.data().iter().map(|v| v.as_f32()).collect();
    STANDARD.encode(psfm::encode(&Block::matrix(t.rows(), t.cols(), data).unwrap()))
}

pub fn decode_block(text: &str) -> Result<Block> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 tensor payload: {e}")))?;
    psfm::decode(&bytes)
}

pub fn decode_tensor<T: Scalar>(text: &str) -> Result<Tensor<T>> {
    let b = decode_block(text)?;
    let rows = b.grid_h as usize * b.grid_w as usize;
    Tensor::from_vec(rows, b.dim as usize, b.data.iter().map(|&v| T::of(v as f64)).collect())
}

/// Highest version both sides speak.
pub fn negotiate_version(server: &[u32]) -> Result<u32> {
    CLIENT_VERSIONS
        .iter()
        .copied()
        .filter(|v| server.contains(v))
        .max()
        .ok_or_else(|| {
            Error::BackendUnavailable(format!(
                "no common protocol version: client {CLIENT_VERSIONS:?}, server {server:?}"
            ))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry `attempt` (0-based): doubles each time.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
    caps: Capabilities,
    version: u32,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(Error),
}

impl RemoteBackend {
    pub fn connect(endpoint: &str, token: Option<&str>) -> Result<Self> {
        Self::connect_with(endpoint, token, RetryPolicy::default())
    }

    pub fn connect_with(endpoint: &str, token: Option<&str>, policy: RetryPolicy) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::BackendUnavailable(format!("http client: {e}")))?;
        let mut backend = Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            token: token.map(str::to_string),
            client,
            policy,
            caps: Capabilities {
                versions: Vec::new(),
                latent_cells: 0,
                latent_channels: 0,
                grid: (0, 0),
                context_dim: 0,
                timesteps: 0,
                taps: Vec::new(),
            },
            version: 0,
        };
        let caps: Capabilities = backend.with_retries(|b| b.get_json("/v1/capabilities"))?;
        backend.version = negotiate_version(&caps.versions)?;
        backend.caps = caps;
        Ok(backend)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// One capabilities round trip without retries, for liveness checks.
    pub fn ping(&self) -> Result<()> {
        match self.get_json::<Capabilities>("/v1/capabilities") {
            Attempt::Done(_) => Ok(()),
            Attempt::Retry(msg) => Err(Error::BackendUnavailable(format!("{}: {msg}", self.endpoint))),
            Attempt::Fail(e) => Err(e),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.endpoint)
    }

    fn authorize(&self, req: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn finish<R: for<'de> Deserialize<'de>>(
        res: reqwest::Result<reqwest::blocking::Response>,
    ) -> Attempt<R> {
        let res = match res {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = res.status();
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Attempt::Retry(format!("server answered {status}"));
        }
        if !status.is_success() {
            let body = res.text().unwrap_or_default();
            return Attempt::Fail(Error::BackendUnavailable(format!("server answered {status}: {body}")));
        }
        match res.json::<R>() {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fail(Error::BackendUnavailable(format!("malformed response: {e}"))),
        }
    }

    fn get_json<R: for<'de> Deserialize<'de>>(&self, path: &str) -> Attempt<R> {
        Self::finish(self.authorize(self.client.get(self.url(path))).send())
    }

    fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Attempt<R> {
        Self::finish(self.authorize(self.client.post(self.url(path))).json(body).send())
    }

    fn with_retries<R>(&self, mut call: impl FnMut(&Self) -> Attempt<R>) -> Result<R> {
        let mut last = String::new();
        for attempt in 0..=self.policy.retries {
            if attempt > 0 {
                std::thread::sleep(self.policy.delay(attempt - 1));
            }
            match call(self) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{} failed after {} attempts: {last}",
            self.endpoint,
            self.policy.retries + 1
        )))
    }
}

impl<T: Scalar> DenoiserBackend<T> for RemoteBackend {
    fn capabilities(&self) -> Capabilities {
        self.caps.clone()
    }

    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding<T>) -> Result<NoisePrediction<T>> {
        check_inputs(&self.caps, z_t, t, prompt)?;
        let req = PredictRequest {
            version: self.version,
            t,
            z_t: encode_tensor(z_t),
            prompt: encode_tensor(&prompt.vectors),
            positions: prompt.positions.clone(),
            channels: prompt.channels.clone(),
            num_channels: prompt.num_channels,
        };
        let res: PredictResponse = self.with_retries(|b| b.post_json("/v1/predict_noise", &req))?;
        let protocol = |e: Error| Error::BackendUnavailable(format!("bad predict_noise payload: {e}"));
        let eps: Tensor<T> = decode_tensor(&res.eps).map_err(protocol)?;
        if eps.shape() != z_t.shape() {
            return Err(Error::BackendUnavailable(format!(
                "noise prediction is {:?}, expected {:?}",
                eps.shape(),
                z_t.shape()
            )));
        }
        let attention = match res.attention {
            Some(text) if !self.caps.taps.is_empty() => {
                let b = decode_block(&text).map_err(protocol)?;
                let (h, w) = self.caps.grid;
                if b.grid_w as usize != prompt.num_channels || b.dim as usize != h * w {
                    return Err(Error::BackendUnavailable("attention block has the wrong layout".into()));
                }
                Some(
                    AttentionStack::new(
                        b.grid_h as usize,
                        prompt.num_channels,
                        h,
                        w,
                        b.data.iter().map(|&v| T::of(v as f64)).collect(),
                        prompt.present(),
                    )
                    .map_err(protocol)?,
                )
            }
            _ => None,
        };
        Ok(NoisePrediction { eps, attention })
    }
}

/// Serialize an attention stack for a [`PredictResponse`].
pub fn encode_attention<T: Scalar>(stack: &AttentionStack<T>) -> String {
    let data = stack.data.iter().map(|v| v.as_f32()).collect();
    let block = Block::new(stack.layers, stack.channels, stack.h * stack.w, data).unwrap();
    STANDARD.encode(psfm::encode(&block))
}

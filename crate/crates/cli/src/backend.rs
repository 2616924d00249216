//! Which denoiser serves inference: the `--backend` flag, then
//! `PARTSMITH_BACKEND_URL`, then the `[backend]` table, then the local model.

use partsmith_core::denoiser::remote::RemoteBackend;
use partsmith_core::denoiser::{DenoiserBackend, InferenceBackend, ToyDenoiser};
use partsmith_core::{Error, Real, Result};

use crate::config::BackendConfig;

pub const URL_VAR: &str = "PARTSMITH_BACKEND_URL";
pub const TOKEN_VAR: &str = "PARTSMITH_BACKEND_TOKEN";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Choice {
    Toy,
    Remote { url: String, token: Option<String> },
}

impl Choice {
    pub fn name(&self) -> String {
        match self {
            Choice::Toy => "toy".into(),
            Choice::Remote { url, .. } => format!("remote:{url}"),
        }
    }
}

pub fn parse_flag(text: &str) -> Result<Choice> {
    if text == "toy" {
        return Ok(Choice::Toy);
    }
    match text.strip_prefix("remote:") {
        Some(url) if !url.is_empty() => Ok(Choice::Remote {
            url: url.to_string(),
            token: None,
        }),
        _ => Err(Error::Validation(format!("backend {text:?} is neither `toy` nor `remote:URL`"))),
    }
}

pub fn resolve(flag: Option<&str>, file: &BackendConfig) -> Result<Choice> {
    let env_url = std::env::var(URL_VAR).ok().filter(|s| !s.is_empty());
    let env_token = std::env::var(TOKEN_VAR).ok().filter(|s| !s.is_empty());
    let token = env_token.or_else(|| file.token.clone());
    let choice = match (flag, env_url, &file.url) {
        (Some(f), _, _) => parse_flag(f)?,
        (None, Some(url), _) => Choice::Remote { url, token: None },
        (None, None, Some(url)) => Choice::Remote {
            url: url.clone(),
            token: None,
        },
        (None, None, None) => Choice::Toy,
    };
    Ok(match choice {
        Choice::Remote { url, .. } => Choice::Remote { url, token },
        Choice::Toy => Choice::Toy,
    })
}

/// Connect `choice`, checking a remote against the local model's shapes.
pub fn connect(choice: &Choice, local: &ToyDenoiser<Real>) -> Result<InferenceBackend<Real>> {
    let backend = match choice {
        Choice::Toy => InferenceBackend::Local(local.clone()),
        Choice::Remote { url, token } => InferenceBackend::Remote(RemoteBackend::connect(url, token.as_deref())?),
    };
    backend.check_matches(&local.capabilities())?;
    Ok(backend)
}

//! HTTP mixer service: browse the frozen dictionary, compose hybrid codes,
//! run seeded generation jobs and fetch per-channel attention heatmaps.
//!
//! Artifacts are read once at startup and never written. Generation runs on
//! a bounded job queue so slow backends do not block the API.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use partsmith_core::checkpoint::load_model;
use partsmith_core::composition::{generate, prompt_text, SamplerOptions};
use partsmith_core::denoiser::{DenoiserBackend, InferenceBackend, PatchAutoencoder};
use partsmith_core::discovery::{PromptCode, SubConceptDictionary};
use partsmith_core::evaluation::{render_heatmaps, Heatmap};
use partsmith_core::experiment::probe_attention;
use partsmith_core::tensor::Tensor;
use partsmith_core::{Error, RealModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const DEFAULT_MAX_JOBS: usize = 2;
pub const DEFAULT_PROBE_T: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Generation jobs allowed to run at once; the rest wait in the queue.
    pub max_jobs: usize,
    pub sampler_steps: usize,
    /// Timestep at which attention is probed on the generated latent.
    pub probe_t: usize,
    pub retry_after_secs: u64,
    /// Origins allowed by CORS; empty allows any.
    pub allowed_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_jobs: DEFAULT_MAX_JOBS,
            sampler_steps: partsmith_core::denoiser::schedule::DEFAULT_SAMPLING_STEPS,
            probe_t: DEFAULT_PROBE_T,
            retry_after_secs: 5,
            allowed_origins: Vec::new(),
        }
    }
}

/// Everything the service reads from disk.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dictionary: SubConceptDictionary,
    pub dictionary_checksum: String,
    pub model: RealModel,
    pub checkpoint_checksum: String,
    pub autoencoder: PatchAutoencoder,
}

impl Artifacts {
    pub fn load(checkpoint: &Path, dictionary: &Path) -> partsmith_core::Result<Self> {
        let dict = SubConceptDictionary::load(dictionary)?;
        let (model, header, checksum) = load_model::<f32>(checkpoint)?;
        if let Some(want) = &header.dictionary_checksum {
            if *want != dict.checksum() {
                return Err(Error::Validation(
                    "checkpoint was trained against a different dictionary".into(),
                ));
            }
        }
        let grid = header.spec.denoiser.grid;
        let patch = header.config.image_size / grid.1.max(1);
        Self::from_parts(dict, model, checksum, PatchAutoencoder::new(patch.max(1)))
    }

    pub fn from_parts(
        dictionary: SubConceptDictionary,
        model: RealModel,
        checkpoint_checksum: String,
        autoencoder: PatchAutoencoder,
    ) -> partsmith_core::Result<Self> {
        if (model.spec.channels, model.spec.splits) != (dictionary.channels(), dictionary.splits) {
            return Err(Error::Validation(format!(
                "model covers {} channels × {} splits, dictionary {} × {}",
                model.spec.channels,
                model.spec.splits,
                dictionary.channels(),
                dictionary.splits
            )));
        }
        Ok(Self {
            dictionary_checksum: dictionary.checksum(),
            dictionary,
            model,
            checkpoint_checksum,
            autoencoder,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
struct Job {
    status: JobStatus,
    code: PromptCode,
    seed: u64,
    style_suffix: Option<String>,
    prompt: Option<String>,
    image_png: Option<Vec<u8>>,
    /// Heatmaps, or why the backend could not provide them.
    attention: Option<Result<Vec<Heatmap>, String>>,
    error: Option<String>,
    backend_down: bool,
}

struct Inner {
    artifacts: Artifacts,
    backend: InferenceBackend<f32>,
    config: ServiceConfig,
    jobs: Mutex<HashMap<String, Job>>,
    permits: Arc<Semaphore>,
    running: AtomicUsize,
    peak_running: AtomicUsize,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(artifacts: Artifacts, backend: InferenceBackend<f32>, config: ServiceConfig) -> partsmith_core::Result<Self> {
        if config.max_jobs == 0 {
            return Err(Error::Validation("max_jobs must be positive".into()));
        }
        backend.check_matches(&artifacts.model.backend.capabilities())?;
        Ok(Self {
            inner: Arc::new(Inner {
                permits: Arc::new(Semaphore::new(config.max_jobs)),
                artifacts,
                backend,
                config,
                jobs: Mutex::new(HashMap::new()),
                running: AtomicUsize::new(0),
                peak_running: AtomicUsize::new(0),
            }),
        })
    }

    /// Serve the local model with its trained adapters.
    pub fn local(artifacts: Artifacts, config: ServiceConfig) -> partsmith_core::Result<Self> {
        let backend = InferenceBackend::Local(artifacts.model.backend.clone());
        Self::new(artifacts, backend, config)
    }

    /// Most generation jobs ever running at the same time.
    pub fn peak_running(&self) -> usize {
        self.inner.peak_running.load(Ordering::SeqCst)
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let origins: Vec<HeaderValue> = state
        .inner
        .config
        .allowed_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    let cors = if origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        cors.allow_origin(AllowOrigin::list(origins))
    };
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/dictionary", get(dictionary))
        .route("/v1/compose", post(compose))
        .route("/v1/generate", post(submit))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/attention/{id}", get(attention))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Offending channel, when the problem is tied to one.
    pub channel: Option<i64>,
    pub message: String,
}

#[derive(Debug)]
pub enum ApiError {
    Invalid { message: String, diagnostics: Vec<Diagnostic> },
    NotFound(String),
    Conflict(String),
    Unsupported(String),
    BackendDown { message: String, retry_after: u64 },
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message, diagnostics) = match self {
            ApiError::Invalid { message, diagnostics } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid", message, diagnostics),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m, Vec::new()),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, "not_ready", m, Vec::new()),
            ApiError::Unsupported(m) => (StatusCode::NOT_IMPLEMENTED, "unsupported", m, Vec::new()),
            ApiError::BackendDown { message, retry_after } => {
                let body = Json(serde_json::json!({"error": "backend_unavailable", "message": message}));
                return (StatusCode::SERVICE_UNAVAILABLE, [(header::RETRY_AFTER, retry_after.to_string())], body).into_response();
            }
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m, Vec::new()),
        };
        let body = serde_json::json!({"error": kind, "message": message, "diagnostics": diagnostics});
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::Invalid {
            message: r.body_text(),
            diagnostics: Vec::new(),
        }
    }
}

/// A code as sent by clients, before any checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawCode {
    pub channels: i64,
    pub pairs: Vec<(i64, i64)>,
}

impl From<&PromptCode> for RawCode {
    fn from(c: &PromptCode) -> Self {
        Self {
            channels: c.channels() as i64,
            pairs: c.pairs().map(|(m, k)| (m as i64, k as i64)).collect(),
        }
    }
}

/// Check a client code against the dictionary, reporting every problem.
pub fn validate_code(raw: &RawCode, dict: &SubConceptDictionary) -> Result<PromptCode, Vec<Diagnostic>> {
    let (channels, splits) = (dict.channels() as i64, dict.splits as i64);
    let mut diags = Vec::new();
    if raw.channels != channels {
        diags.push(Diagnostic {
            channel: None,
            message: format!("code has {} channels, dictionary has {channels}", raw.channels),
        });
    }
    let mut seen = Vec::new();
    for &(m, k) in &raw.pairs {
        if !(0..channels).contains(&m) {
            diags.push(Diagnostic {
                channel: Some(m),
                message: format!("channel outside 0..{channels}"),
            });
            continue;
        }
        if !(1..=splits).contains(&k) {
            diags.push(Diagnostic {
                channel: Some(m),
                message: format!("split {k} outside 1..={splits}"),
            });
        }
        if seen.contains(&m) {
            diags.push(Diagnostic {
                channel: Some(m),
                message: "channel listed more than once".into(),
            });
        }
        seen.push(m);
    }
    if !diags.is_empty() {
        return Err(diags);
    }
    let pairs: Vec<(usize, usize)> = raw.pairs.iter().map(|&(m, k)| (m as usize, k as usize)).collect();
    PromptCode::from_pairs(channels as usize, &pairs).map_err(|e| {
        vec![Diagnostic {
            channel: None,
            message: e.to_string(),
        }]
    })
}

fn checked(raw: &RawCode, dict: &SubConceptDictionary, what: &str) -> Result<PromptCode, ApiError> {
    validate_code(raw, dict).map_err(|diagnostics| ApiError::Invalid {
        message: format!("invalid {what} code"),
        diagnostics,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeView {
    pub code: PromptCode,
    pub text: String,
}

impl From<&PromptCode> for CodeView {
    fn from(c: &PromptCode) -> Self {
        Self {
            code: c.clone(),
            text: c.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthView {
    pub status: String,
    pub backend: String,
    pub backend_ready: bool,
    pub dictionary_checksum: String,
    pub checkpoint_checksum: String,
    pub max_jobs: usize,
    pub running_jobs: usize,
}

async fn backend_ready(state: &AppState) -> Result<(), String> {
    let inner = state.inner.clone();
    match tokio::task::spawn_blocking(move || inner.backend.ready()).await {
        Ok(Ok(())) => Ok(()),
        Ok(Err(e)) => Err(e.to_string()),
        Err(e) => Err(e.to_string()),
    }
}

async fn health(State(state): State<AppState>) -> Json<HealthView> {
    let inner = &state.inner;
    Json(HealthView {
        status: "ok".into(),
        backend: inner.backend.name(),
        backend_ready: backend_ready(&state).await.is_ok(),
        dictionary_checksum: inner.artifacts.dictionary_checksum.clone(),
        checkpoint_checksum: inner.artifacts.checkpoint_checksum.clone(),
        max_jobs: inner.config.max_jobs,
        running_jobs: inner.running.load(Ordering::SeqCst),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionaryView {
    pub dataset_name: String,
    pub dim: usize,
    pub parts: usize,
    pub splits: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// Selectable splits per channel.
    pub split_counts: Vec<usize>,
    pub checksum: String,
}

pub fn channel_name(m: usize) -> String {
    if m == 0 {
        "background".into()
    } else {
        format!("part {m}")
    }
}

async fn dictionary(State(state): State<AppState>) -> Json<DictionaryView> {
    let d = &state.inner.artifacts.dictionary;
    Json(DictionaryView {
        dataset_name: d.metadata.dataset_name.clone(),
        dim: d.dim,
        parts: d.parts,
        splits: d.splits,
        channels: d.channels(),
        channel_names: (0..d.channels()).map(channel_name).collect(),
        split_counts: vec![d.splits; d.channels()],
        checksum: state.inner.artifacts.dictionary_checksum.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replacement {
    pub channel: i64,
    /// New split, or null to drop the channel.
    pub split: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub base: RawCode,
    #[serde(default)]
    pub replacements: Vec<Replacement>,
}

async fn compose(State(state): State<AppState>, body: Result<Json<ComposeRequest>, JsonRejection>) -> Result<Json<CodeView>, ApiError> {
    let Json(req) = body?;
    let dict = &state.inner.artifacts.dictionary;
    let base = checked(&req.base, dict, "base")?;
    let mut splits: Vec<Option<i64>> = base.splits().iter().map(|s| s.map(|k| k as i64)).collect();
    let mut diags = Vec::new();
    for r in &req.replacements {
        match usize::try_from(r.channel).ok().filter(|&m| m < splits.len()) {
            Some(m) => splits[m] = r.split,
            None => diags.push(Diagnostic {
                channel: Some(r.channel),
                message: format!("replacement channel outside 0..{}", splits.len()),
            }),
        }
    }
    let raw = RawCode {
        channels: splits.len() as i64,
        pairs: splits.iter().enumerate().filter_map(|(m, k)| k.map(|k| (m as i64, k))).collect(),
    };
    if let Err(more) = validate_code(&raw, dict) {
        diags.extend(more);
    }
    if !diags.is_empty() {
        return Err(ApiError::Invalid {
            message: "replacements produce an invalid code".into(),
            diagnostics: diags,
        });
    }
    Ok(Json(CodeView::from(&checked(&raw, dict, "composed")?)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub code: RawCode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub style_suffix: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub status: JobStatus,
}

async fn submit(
    State(state): State<AppState>,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<JobTicket>), ApiError> {
    let Json(req) = body?;
    let code = checked(&req.code, &state.inner.artifacts.dictionary, "")?;
    if let Err(message) = backend_ready(&state).await {
        return Err(ApiError::BackendDown {
            message,
            retry_after: state.inner.config.retry_after_secs,
        });
    }
    let id = uuid::Uuid::new_v4().to_string();
    let style = req.style_suffix.filter(|s| !s.trim().is_empty());
    state.inner.jobs.lock().unwrap().insert(
        id.clone(),
        Job {
            status: JobStatus::Queued,
            code,
            seed: req.seed,
            style_suffix: style,
            prompt: None,
            image_png: None,
            attention: None,
            error: None,
            backend_down: false,
        },
    );
    tokio::spawn(run_job(state.clone(), id.clone()));
    Ok((
        StatusCode::ACCEPTED,
        Json(JobTicket {
            job_id: id,
            status: JobStatus::Queued,
        }),
    ))
}

struct Rendered {
    prompt: String,
    image_png: Vec<u8>,
    attention: Result<Vec<Heatmap>, String>,
}

fn render(inner: &Inner, code: &PromptCode, seed: u64, style: Option<&str>) -> partsmith_core::Result<Rendered> {
    let model = &inner.artifacts.model;
    let prompt = model.embed(code, style)?;
    let words = prompt_text(&model.spec.template, code, style);
    let opts = SamplerOptions {
        steps: inner.config.sampler_steps,
        seed,
    };
    let gen = generate(&inner.backend, &prompt, words, &inner.artifacts.autoencoder, &opts)?;
    let (rows, cols) = gen.latent.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::normal(rows, cols, 1.0, &mut rng);
    let attention = match probe_attention(&inner.backend, model, code, &gen.latent, inner.config.probe_t, &noise) {
        Ok(att) => Ok(render_heatmaps(&att)),
        Err(Error::Unsupported(reason)) => Err(reason),
        Err(e) => return Err(e),
    };
    Ok(Rendered {
        prompt: gen.prompt,
        image_png: gen.image.to_png()?,
        attention,
    })
}

async fn run_job(state: AppState, id: String) {
    let permit = state.inner.permits.clone().acquire_owned().await.expect("semaphore is never closed");
    let (code, seed, style) = {
        let mut jobs = state.inner.jobs.lock().unwrap();
        let job = jobs.get_mut(&id).expect("job registered before spawn");
        job.status = JobStatus::Running;
        (job.code.clone(), job.seed, job.style_suffix.clone())
    };
    let now = state.inner.running.fetch_add(1, Ordering::SeqCst) + 1;
    state.inner.peak_running.fetch_max(now, Ordering::SeqCst);
    let inner = state.inner.clone();
    let result = tokio::task::spawn_blocking(move || render(&inner, &code, seed, style.as_deref())).await;
    state.inner.running.fetch_sub(1, Ordering::SeqCst);
    drop(permit);
    let mut jobs = state.inner.jobs.lock().unwrap();
    let job = jobs.get_mut(&id).expect("jobs are never removed");
    match result {
        Ok(Ok(r)) => {
            job.status = JobStatus::Done;
            job.prompt = Some(r.prompt);
            job.image_png = Some(r.image_png);
            job.attention = Some(r.attention);
        }
        Ok(Err(e)) => {
            job.status = JobStatus::Failed;
            job.backend_down = e.is_dependency();
            job.error = Some(e.to_string());
        }
        Err(e) => {
            job.status = JobStatus::Failed;
            job.error = Some(format!("job panicked: {e}"));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobView {
    pub id: String,
    pub status: JobStatus,
    pub code: CodeView,
    pub seed: u64,
    pub style_suffix: Option<String>,
    pub prompt: Option<String>,
    /// Base64 PNG once the job is done.
    pub image_png: Option<String>,
    pub error: Option<String>,
}

fn lookup(state: &AppState, id: &str) -> Result<Job, ApiError> {
    state
        .inner
        .jobs
        .lock()
        .unwrap()
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("no job {id}")))
}

async fn job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let job = lookup(&state, &id)?;
    let view = JobView {
        id,
        status: job.status,
        code: CodeView::from(&job.code),
        seed: job.seed,
        style_suffix: job.style_suffix,
        prompt: job.prompt,
        image_png: job.image_png.map(|b| B64.encode(b)),
        error: job.error,
    };
    if job.backend_down {
        let retry = state.inner.config.retry_after_secs.to_string();
        return Ok((StatusCode::SERVICE_UNAVAILABLE, [(header::RETRY_AFTER, retry)], Json(view)).into_response());
    }
    Ok(Json(view).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapView {
    pub channel: usize,
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Base64 grayscale PNG.
    pub png: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionView {
    pub id: String,
    pub code: CodeView,
    pub probe_t: usize,
    pub heatmaps: Vec<HeatmapView>,
}

async fn attention(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<AttentionView>, ApiError> {
    let job = lookup(&state, &id)?;
    let maps = match (job.status, job.attention) {
        (JobStatus::Done, Some(Ok(maps))) => maps,
        (JobStatus::Done, Some(Err(reason))) => return Err(ApiError::Unsupported(reason)),
        (JobStatus::Failed, _) => return Err(ApiError::Conflict(format!("job {id} failed"))),
        _ => return Err(ApiError::Conflict(format!("job {id} has not finished"))),
    };
    let heatmaps = maps
        .iter()
        .map(|h| {
            Ok(HeatmapView {
                channel: h.channel,
                name: channel_name(h.channel),
                width: h.width,
                height: h.height,
                png: B64.encode(h.to_png().map_err(|e| ApiError::Internal(e.to_string()))?),
            })
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(Json(AttentionView {
        id,
        code: CodeView::from(&job.code),
        probe_t: state.inner.config.probe_t,
        heatmaps,
    }))
}

//! Desk-scale experiment harness on the synthetic creature task: train,
//! probe attention, generate and score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composition::{generate, prompt_text, sample_composition_suite, SamplerOptions, SuiteItem};
use crate::denoiser::{DenoiserBackend, NoiseSchedule, ToyConfig};
use crate::discovery::PromptCode;
use crate::error::{validation, Error, Result};
use crate::evaluation::{aggregate, argmax_iou, emr_cosim, eval_suite, predict_code, EvalResult, MetricStatus, SuiteReport};
use crate::losses::{normalize_attention, NormalizedAttention};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::toy_task::{ToyTask, ToyTaskConfig};
use crate::training::{ModelSpec, TrainConfig, TrainSample, TrainedModel, Trainer};

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.1, 0.01, 0.001, 0.0001, 0.00001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExperimentConfig {
    pub task: ToyTaskConfig,
    pub denoiser: ToyConfig,
    pub train: TrainConfig,
    /// Timestep at which attention is probed for IoU; low enough that the
    /// noised latent still shows the parts.
    pub probe_t: usize,
    pub probe_seed: u64,
    pub suite_size: usize,
    pub suite_pool: usize,
    pub suite_sources: usize,
    pub suite_seed: u64,
    pub sampler_steps: usize,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        Self {
            task: ToyTaskConfig::default(),
            denoiser: ToyConfig::default(),
            train: TrainConfig::toy(),
            probe_t: 100,
            probe_seed: 1234,
            suite_size: 50,
            suite_pool: 4,
            suite_sources: 3,
            suite_seed: 0,
            sampler_steps: crate::denoiser::schedule::DEFAULT_SAMPLING_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRunReport {
    pub lambda_attn: f64,
    pub seed: u64,
    pub no_projector: bool,
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub attention_iou: f64,
    /// Regenerating every training image from its own code.
    pub reconstruction: EvalResult,
    pub composition: SuiteReport,
}

/// Normalized attention of `prompt` on a noised copy of `z0`.
pub fn probe_attention<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    model: &TrainedModel<T>,
    code: &PromptCode,
    z0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
) -> Result<NormalizedAttention<T>> {
    let schedule = NoiseSchedule::linear(backend.capabilities().timesteps, 1e-4, 0.02);
    let prompt = model.embed(code, None)?;
    let z_t = schedule.add_noise(z0, noise, t);
    let stack = backend
        .predict_noise(&z_t, t, &prompt)?
        .attention
        .ok_or_else(|| Error::Unsupported("backend exposes no attention taps".into()))?;
    normalize_attention(&stack)
}

/// Mean argmax IoU over samples at a fixed timestep and seeded noise.
pub fn attention_iou<T: Scalar>(model: &TrainedModel<T>, samples: &[TrainSample<T>], t: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(validation("no samples to probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for s in samples {
        let (r, c) = s.latent.shape();
        let noise = Tensor::normal(r, c, 1.0, &mut rng);
        let att = probe_attention(&model.backend, model, &s.code, &s.latent, t, &noise)?;
        total += argmax_iou(&att, &s.masks)?;
    }
    Ok(total / samples.len() as f64)
}

fn render_code<T: Scalar>(model: &TrainedModel<T>, task: &ToyTask, code: &PromptCode, opts: &SamplerOptions) -> Result<crate::feature_io::RgbImage> {
    let prompt = model.embed(code, None)?;
    let words = prompt_text(&model.spec.template, code, None);
    Ok(generate(&model.backend, &prompt, words, &task.autoencoder(), opts)?.image)
}

/// Train one model and score it.
pub fn run_toy(task: &ToyTask, cfg: &ToyExperimentConfig) -> Result<ToyRunReport> {
    let spec = ModelSpec::new(cfg.denoiser, task.dictionary.channels(), task.dictionary.splits, &cfg.train);
    let trainer = Trainer::<f32>::new(spec, cfg.train.clone(), task.samples(cfg.denoiser.grid)?)?;
    let mut state = trainer.init_state();
    trainer.run(&mut state, |_, _| Ok(()))?;
    let initial_loss = state.history.first().map_or(f64::NAN, |(_, r)| r.l_total);
    let final_loss = state.loss_ema.unwrap_or(f64::NAN);
    let model = trainer.model(&state);

    let iou = attention_iou(&model, trainer.samples(), cfg.probe_t, cfg.probe_seed)?;

    let recon = task
        .codes
        .iter()
        .enumerate()
        .map(|(i, code)| {
            let opts = SamplerOptions {
                steps: cfg.sampler_steps,
                seed: cfg.suite_seed.wrapping_add(i as u64),
            };
            let img = render_code(&model, task, code, &opts)?;
            emr_cosim(code, &predict_code(&img, &task.dictionary, &task.extractor)?, &task.dictionary)
        })
        .collect::<Result<Vec<_>>>()?;

    let labelled: Vec<(String, PromptCode)> = task.ids.iter().cloned().zip(task.codes.iter().cloned()).collect();
    let suite = sample_composition_suite(&labelled, cfg.suite_size, cfg.suite_pool, cfg.suite_sources, cfg.suite_seed)?;
    let composition = eval_suite(&suite.items, &task.dictionary, &task.extractor, |i, item: &SuiteItem| {
        let opts = SamplerOptions {
            steps: cfg.sampler_steps,
            seed: cfg.suite_seed.wrapping_add(1000 + i as u64),
        };
        render_code(&model, task, &item.code, &opts)
    })?;

    Ok(ToyRunReport {
        lambda_attn: cfg.train.lambda_attn,
        seed: cfg.train.seed,
        no_projector: cfg.train.no_projector,
        steps: state.step,
        initial_loss,
        final_loss,
        attention_iou: iou,
        reconstruction: aggregate(&recon)?,
        composition,
    })
}

/// Row of the λ ablation, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_attn: f64,
    pub seeds: Vec<u64>,
    pub emr: f64,
    pub cosim: f64,
    pub attention_iou: f64,
    pub fid: MetricStatus,
}

/// Train and score one model per (λ, seed) on the toy task.
pub fn lambda_sweep(lambdas: &[f64], seeds: &[u64], cfg: &ToyExperimentConfig) -> Result<(Vec<SweepRow>, Vec<ToyRunReport>)> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(validation("sweep needs at least one λ and one seed"));
    }
    let task = ToyTask::build(cfg.task)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &lambda in lambdas {
        let mut group = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.train.lambda_attn = lambda;
            c.train.seed = seed;
            group.push(run_toy(&task, &c)?);
        }
        let scored: Vec<EvalResult> = group.iter().filter_map(|r| r.composition.overall.clone()).collect();
        let mean = |f: &dyn Fn(&ToyRunReport) -> f64| group.iter().map(f).sum::<f64>() / group.len() as f64;
        let (emr, cosim) = match aggregate(&scored) {
            Ok(a) => (a.emr, a.cosim),
            Err(_) => (f64::NAN, f64::NAN),
        };
        rows.push(SweepRow {
            lambda_attn: lambda,
            seeds: seeds.to_vec(),
            emr,
            cosim,
            attention_iou: mean(&|r| r.attention_iou),
            fid: group[0].composition.fid.clone(),
        });
        runs.extend(group);
    }
    Ok((rows, runs))
}

//! Joint optimization of the token table, projector and adapters against
//! the reconstruction loss plus the weighted attention loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::denoiser::autoencoder::flip_latent;
use crate::denoiser::toy::{LoraAdapter, LoraVars, ToyConfig, ToyDenoiser};
use crate::denoiser::DenoiserBackend;
use crate::discovery::{PartMaskSet, PromptCode};
use crate::error::{validation, Error, Result};
use crate::losses::{AttnLossKind, LossReport, DEFAULT_EPSILON, DEFAULT_LAMBDA_ATTN};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::token_space::{
    embed_code, embed_code_graph, Projector, PromptEmbedding, PromptTemplate, TokenDictionary, TokenSpace,
    TokenSpaceVars, ToyTextEncoder, DEFAULT_TEMPLATE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_attn: f64,
    pub attn_loss: AttnLossKind,
    pub epsilon: f64,
    /// Random horizontal flips of latents and masks together.
    pub hflip: bool,
    pub image_size: usize,
    pub seed: u64,
    /// Training timesteps are drawn from `t_min..t_max`.
    pub t_min: usize,
    pub t_max: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Train raw token rows without the projector.
    pub no_projector: bool,
    /// Projector hidden width; twice the token width when unset.
    pub projector_hidden: Option<usize>,
    /// Amplitude of the uniform noise added to the initial token rows.
    pub token_init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            grad_accum: 1,
            epochs: 100,
            max_steps: None,
            lr: 1e-4,
            weight_decay: 0.01,
            lambda_attn: DEFAULT_LAMBDA_ATTN,
            attn_loss: AttnLossKind::Bce,
            epsilon: DEFAULT_EPSILON,
            hflip: true,
            image_size: 512,
            seed: 0,
            t_min: 0,
            t_max: 1000,
            log_every: 100,
            checkpoint_every: 1000,
            lora_rank: 4,
            lora_alpha: 4.0,
            no_projector: false,
            projector_hidden: None,
            token_init_noise: 0.02,
        }
    }
}

impl TrainConfig {
    /// Settings for the bundled synthetic task: 32 px images, the whole
    /// corpus per step, a larger learning rate to make 500 steps meaningful,
    /// and timesteps kept away from the nearly noise-free end.
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            image_size: 32,
            max_steps: Some(500),
            lr: 1e-2,
            t_min: 50,
            t_max: 1000,
            log_every: 10,
            checkpoint_every: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("epochs", self.epochs),
            ("image_size", self.image_size),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(validation(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda_attn >= 0.0) || !(self.epsilon > 0.0) {
            return Err(validation("lr and epsilon must be positive; weight_decay and lambda_attn non-negative"));
        }
        if self.t_min >= self.t_max {
            return Err(validation(format!("empty timestep range {}..{}", self.t_min, self.t_max)));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(validation("log_every and checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Everything needed to rebuild the model around a dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub denoiser: ToyConfig,
    pub text_seed: u64,
    pub template: Vec<String>,
    pub channels: usize,
    pub splits: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Hidden width of the projector; `None` means raw token rows.
    pub projector_hidden: Option<usize>,
}

impl ModelSpec {
    pub fn new(denoiser: ToyConfig, channels: usize, splits: usize, cfg: &TrainConfig) -> Self {
        let projector_hidden = if cfg.no_projector {
            None
        } else {
            Some(cfg.projector_hidden.unwrap_or(2 * denoiser.context_dim))
        };
        Self {
            denoiser,
            text_seed: 0x7e47,
            template: DEFAULT_TEMPLATE.iter().map(|w| w.to_string()).collect(),
            channels,
            splits,
            lora_rank: cfg.lora_rank,
            lora_alpha: cfg.lora_alpha,
            projector_hidden,
        }
    }

    pub fn encoder(&self) -> ToyTextEncoder {
        ToyTextEncoder::new(self.denoiser.context_dim, self.text_seed)
    }

    /// A model with the right tensor shapes and zero trainable values, to be
    /// filled from a checkpoint.
    pub fn skeleton<T: Scalar>(&self) -> Result<TrainedModel<T>> {
        let width = self.denoiser.context_dim;
        let dictionary = TokenDictionary::new(self.channels, self.splits, Tensor::zeros(self.channels * self.splits, width))?;
        let projector = self.projector_hidden.map(|h| Projector {
            w1: Tensor::zeros(h, width),
            b1: Tensor::zeros(1, h),
            w2: Tensor::zeros(width, h),
            b2: Tensor::zeros(1, width),
        });
        let backend = ToyDenoiser::new(self.denoiser)?.attach_lora(self.lora_rank, self.lora_alpha, 0)?;
        Ok(TrainedModel {
            spec: self.clone(),
            backend,
            space: TokenSpace { dictionary, projector },
        })
    }

    pub fn template<T: Scalar>(&self, style: Option<&str>) -> PromptTemplate<T> {
        let prefix: Vec<&str> = self.template.iter().map(String::as_str).collect();
        let suffix: Vec<&str> = style.map(|s| s.split_whitespace().collect()).unwrap_or_default();
        PromptTemplate::from_words(&self.encoder(), &prefix, &suffix)
    }
}

/// One training example: clean latent, its code and part masks on the
/// attention grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub image_id: String,
    pub latent: Tensor<T>,
    pub latent_grid: (usize, usize),
    pub code: PromptCode,
    pub masks: PartMaskSet,
}

/// A sample with its draw of timestep, noise and flip applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample<T> {
    pub image_id: String,
    pub latent: Tensor<T>,
    pub masks: PartMaskSet,
    pub code: PromptCode,
    pub t: usize,
    pub noise: Tensor<T>,
    pub flipped: bool,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn new(sample: &TrainSample<T>, t: usize, noise: Tensor<T>, flip: bool) -> Self {
        let (latent, masks) = if flip {
            (flip_latent(&sample.latent, sample.latent_grid), sample.masks.flipped_horizontally())
        } else {
            (sample.latent.clone(), sample.masks.clone())
        };
        Self {
            image_id: sample.image_id.clone(),
            latent,
            masks,
            code: sample.code.clone(),
            t,
            noise,
            flipped: flip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_attn: f64,
    pub kind: AttnLossKind,
    pub epsilon: f64,
}

impl From<&TrainConfig> for LossConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda_attn: c.lambda_attn,
            kind: c.attn_loss,
            epsilon: c.epsilon,
        }
    }
}

/// Loss nodes recorded for one sample.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub total: Var,
    pub ldm: Var,
    pub attn: Option<Var>,
    pub space: TokenSpaceVars,
    pub lora: Option<LoraVars<T>>,
}

/// Record `l_ldm + λ·l_attn` for one prepared sample.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    backend: &ToyDenoiser<T>,
    space: &TokenSpace<T>,
    lora: Option<&LoraAdapter<T>>,
    template: &PromptTemplate<T>,
    sample: &PreparedSample<T>,
    loss: &LossConfig,
    trainable: bool,
) -> Result<Objective<T>> {
    let space_vars = space.vars(g, trainable);
    let lora_vars = lora.map(|l| LoraVars::new(g, l, trainable));
    let prompt = embed_code_graph(g, &sample.code, space, &space_vars, template)?;
    let z_t = backend.schedule.add_noise(&sample.latent, &sample.noise, sample.t);
    let out = backend.forward(g, &z_t, sample.t, &prompt, lora_vars.as_ref())?;
    let ldm = g.mse(out.eps, sample.noise.clone());
    let attn = if out.maps.is_empty() {
        None
    } else {
        let (h, w) = backend.config.grid;
        Some(g.attention_loss(
            &out.maps,
            &prompt.present(),
            h,
            w,
            &sample.masks,
            T::of(loss.epsilon),
            loss.kind,
        )?)
    };
    let total = match attn {
        Some(a) if loss.lambda_attn > 0.0 => {
            let weighted = g.scale(a, T::of(loss.lambda_attn));
            g.add(ldm, weighted)
        }
        _ => ldm,
    };
    Ok(Objective {
        total,
        ldm,
        attn,
        space: space_vars,
        lora: lora_vars,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub space: TokenSpace<T>,
    pub lora: LoraAdapter<T>,
    pub optimizer: AdamW<T>,
    pub rng: ChaCha8Rng,
    /// Current epoch's sample order and position in it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub loss_ema: Option<f64>,
    pub history: Vec<(u64, LossReport)>,
    /// Checksums of the checkpoints this state descends from, oldest first.
    pub lineage: Vec<String>,
}

impl<T: Scalar> TrainState<T> {
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.space.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        out.extend(self.lora.named_tensors_mut().into_iter().map(|(_, t)| t));
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.space.named_tensors();
        out.extend(self.lora.named_tensors());
        out
    }
}

/// Diagnostic record attached to a non-finite loss error.
#[derive(Debug, Clone, Serialize)]
struct BatchDump {
    step: u64,
    image_id: String,
    t: usize,
    flipped: bool,
    code: String,
    l_ldm: f64,
    l_attn: Option<f64>,
}

pub struct Trainer<T> {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub backend: ToyDenoiser<T>,
    pub template: PromptTemplate<T>,
    samples: Vec<TrainSample<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(spec: ModelSpec, config: TrainConfig, samples: Vec<TrainSample<T>>) -> Result<Self> {
        config.validate()?;
        let backend = ToyDenoiser::new(spec.denoiser)?;
        let caps = backend.capabilities();
        if config.lambda_attn > 0.0 && caps.taps.is_empty() {
            return Err(Error::Unsupported(
                "attention loss requested but the backend exposes no attention taps".into(),
            ));
        }
        if config.t_max > caps.timesteps {
            return Err(validation(format!("t_max {} exceeds {} timesteps", config.t_max, caps.timesteps)));
        }
        if samples.is_empty() {
            return Err(validation("no training samples"));
        }
        for s in &samples {
            s.code.check_against(spec.channels, spec.splits)?;
            if s.latent.shape() != caps.latent_shape() {
                return Err(validation(format!(
                    "{}: latent is {:?}, backend expects {:?}",
                    s.image_id,
                    s.latent.shape(),
                    caps.latent_shape()
                )));
            }
            if (s.masks.grid_h, s.masks.grid_w) != caps.grid {
                return Err(validation(format!(
                    "{}: masks are {}x{}, attention grid is {:?}",
                    s.image_id, s.masks.grid_h, s.masks.grid_w, caps.grid
                )));
            }
            if s.masks.present != s.code.present() {
                return Err(validation(format!("{}: code and mask presence disagree", s.image_id)));
            }
        }
        let template = spec.template(None);
        Ok(Self {
            spec,
            config,
            backend,
            template,
            samples,
        })
    }

    pub fn samples(&self) -> &[TrainSample<T>] {
        &self.samples
    }

    pub fn total_steps(&self) -> u64 {
        self.config.max_steps.unwrap_or_else(|| {
            let per_step = self.config.batch_size * self.config.grad_accum;
            (self.samples.len().div_ceil(per_step) * self.config.epochs) as u64
        })
    }

    pub fn init_state(&self) -> TrainState<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let encoder = self.spec.encoder();
        let dictionary = TokenDictionary::init(
            self.spec.channels,
            self.spec.splits,
            &encoder.mean_embedding::<T>(),
            self.config.token_init_noise,
            &mut rng,
        );
        let projector = self
            .spec
            .projector_hidden
            .map(|h| Projector::init(self.spec.denoiser.context_dim, h, &mut rng));
        let space = TokenSpace { dictionary, projector };
        let lora = self
            .backend
            .clone()
            .attach_lora(self.spec.lora_rank, self.spec.lora_alpha, rng.random())
            .expect("toy backend has cross-attention")
            .lora
            .unwrap();
        let mut state = TrainState {
            step: 0,
            optimizer: AdamW::new(self.config.adamw(), &[]),
            space,
            lora,
            rng,
            order: Vec::new(),
            cursor: 0,
            loss_ema: None,
            history: Vec::new(),
            lineage: Vec::new(),
        };
        let shapes: Vec<(usize, usize)> = state.named_parameters().iter().map(|(_, t)| t.shape()).collect();
        state.optimizer = AdamW::new(self.config.adamw(), &shapes);
        state
    }

    fn next_index(&self, state: &mut TrainState<T>) -> usize {
        if state.cursor >= state.order.len() {
            state.order = (0..self.samples.len()).collect();
            state.order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        state.cursor += 1;
        state.order[state.cursor - 1]
    }

    fn prepare(&self, state: &mut TrainState<T>) -> PreparedSample<T> {
        let idx = self.next_index(state);
        let sample = &self.samples[idx];
        let flip = self.config.hflip && state.rng.random_bool(0.5);
        let t = state.rng.random_range(self.config.t_min..self.config.t_max);
        let (rows, cols) = sample.latent.shape();
        let noise = Tensor::normal(rows, cols, 1.0, &mut state.rng);
        PreparedSample::new(sample, t, noise, flip)
    }

    /// One optimizer step over `batch_size × grad_accum` samples.
    pub fn step(&self, state: &mut TrainState<T>) -> Result<LossReport> {
        let loss_cfg = LossConfig::from(&self.config);
        let n = self.config.batch_size * self.config.grad_accum;
        let weight = T::one() / T::from_usize(n).unwrap();
        let n_params = state.named_parameters().len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_params];
        let (mut sum_ldm, mut sum_attn) = (0.0, 0.0);
        for _ in 0..n {
            let prepared = self.prepare(state);
            let mut g = Graph::new();
            let obj = objective(
                &mut g,
                &self.backend,
                &state.space,
                Some(&state.lora),
                &self.template,
                &prepared,
                &loss_cfg,
                true,
            )?;
            let l_ldm = g.scalar(obj.ldm).as_f64();
            let l_attn = obj.attn.map(|a| g.scalar(a).as_f64());
            if !l_ldm.is_finite() || l_attn.is_some_and(|a| !a.is_finite()) {
                let dump = BatchDump {
                    step: state.step + 1,
                    image_id: prepared.image_id.clone(),
                    t: prepared.t,
                    flipped: prepared.flipped,
                    code: prepared.code.to_string(),
                    l_ldm,
                    l_attn,
                };
                return Err(Error::NonFinite {
                    step: state.step + 1,
                    detail: serde_json::to_string(&dump)?,
                });
            }
            sum_ldm += l_ldm;
            sum_attn += l_attn.unwrap_or(0.0);
            let mut back = g.backward(obj.total);
            let mut vars = obj.space.flat();
            vars.extend(obj.lora.as_ref().map(|l| l.flat()).unwrap_or_default());
            for (slot, v) in grads.iter_mut().zip(vars) {
                if let Some(gv) = back.take(v) {
                    let gv = gv.scaled(weight);
                    match slot {
                        Some(acc) => acc.add_assign(&gv),
                        None => *slot = Some(gv),
                    }
                }
            }
        }
        let TrainState {
            space, lora, optimizer, ..
        } = state;
        let mut params: Vec<&mut Tensor<T>> = space.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        params.extend(lora.named_tensors_mut().into_iter().map(|(_, t)| t));
        optimizer.update(&mut params, &grads);
        state.step += 1;
        if state.named_parameters().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite {
                step: state.step,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        let report = LossReport::new(sum_ldm / n as f64, sum_attn / n as f64, self.config.lambda_attn);
        state.loss_ema = Some(match state.loss_ema {
            Some(e) => 0.9 * e + 0.1 * report.l_total,
            None => report.l_total,
        });
        if state.step == 1 || state.step % self.config.log_every == 0 {
            state.history.push((state.step, report));
        }
        Ok(report)
    }

    /// Step until `total_steps`, calling `hook` after every step.
    pub fn run(
        &self,
        state: &mut TrainState<T>,
        mut hook: impl FnMut(&TrainState<T>, &LossReport) -> Result<()>,
    ) -> Result<()> {
        while state.step < self.total_steps() {
            let report = self.step(state)?;
            hook(state, &report)?;
        }
        Ok(())
    }

    pub fn model(&self, state: &TrainState<T>) -> TrainedModel<T> {
        let mut backend = self.backend.clone();
        backend.lora = Some(state.lora.clone());
        TrainedModel {
            spec: self.spec.clone(),
            backend,
            space: state.space.clone(),
        }
    }
}

/// A denoiser with trained adapters plus the trained token space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub spec: ModelSpec,
    pub backend: ToyDenoiser<T>,
    pub space: TokenSpace<T>,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn embed(&self, code: &PromptCode, style: Option<&str>) -> Result<PromptEmbedding<T>> {
        code.check_against(self.spec.channels, self.spec.splits)?;
        embed_code(code, &self.space, &self.spec.template(style))
    }
}

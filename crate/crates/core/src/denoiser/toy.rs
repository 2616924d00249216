//! Small cross-attention denoiser over a `cells × C` latent grid.
//!
//! Each latent cell is embedded with fixed position and timestep codes and
//! passes through single-head cross-attention blocks whose keys and values
//! come from the prompt. The summed block outputs decode to a clean-latent
//! estimate, which is turned into a noise prediction through the schedule.
//! Base weights are drawn once from the config seed and never trained; only
//! the optional low-rank adapters are.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schedule::NoiseSchedule;
use super::{check_inputs, Capabilities, DenoiserBackend, NoisePrediction};
use crate::autodiff::{Graph, Var};
use crate::error::{validation, Error, Result};
use crate::losses::AttentionStack;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::token_space::{PromptEmbedding, PromptVars};

pub const PROTOCOL_VERSION: u32 = 1;

/// Names of the adapted projections inside every block.
pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "out"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub latent_channels: usize,
    pub grid: (usize, usize),
    pub d_model: usize,
    pub context_dim: usize,
    pub blocks: usize,
    pub seed: u64,
    /// Whether attention maps are returned with predictions.
    pub attention_taps: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            grid: (16, 16),
            d_model: 32,
            context_dim: 16,
            blocks: 3,
            seed: 0,
            attention_taps: true,
        }
    }
}

impl ToyConfig {
    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T> {
    /// `d_model × d_model`
    pub q: Tensor<T>,
    /// `d_model × context_dim`
    pub k: Tensor<T>,
    /// `d_model × context_dim`
    pub v: Tensor<T>,
    /// `d_model × d_model`
    pub out: Tensor<T>,
}

impl<T: Scalar> CrossAttention<T> {
    fn projections(&self) -> [&Tensor<T>; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }
}

/// `W + (α/r)·B·A` with `A: r × d_in` and `B: d_out × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    /// One pair per projection in [`PROJECTIONS`] order, per block.
    pub blocks: Vec<[LoraPair<T>; 4]>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn scale(&self) -> T {
        T::of(self.alpha / self.rank as f64)
    }

    pub fn trainable_parameters(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|p| p.down.len() + p.up.len())
            .sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (b, pairs) in self.blocks.iter().enumerate() {
            for (name, pair) in PROJECTIONS.iter().zip(pairs) {
                out.push((format!("lora.block{b}.{name}.down"), &pair.down));
                out.push((format!("lora.block{b}.{name}.up"), &pair.up));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (b, pairs) in self.blocks.iter_mut().enumerate() {
            for (name, pair) in PROJECTIONS.iter().zip(pairs.iter_mut()) {
                out.push((format!("lora.block{b}.{name}.down"), &mut pair.down));
                out.push((format!("lora.block{b}.{name}.up"), &mut pair.up));
            }
        }
        out
    }
}

/// Graph handles for adapter factors, `(down, up)` per projection.
#[derive(Debug, Clone)]
pub struct LoraVars<T> {
    pub blocks: Vec<[(Var, Var); 4]>,
    pub scale: T,
}

impl<T: Scalar> LoraVars<T> {
    pub fn new(g: &mut Graph<T>, adapter: &LoraAdapter<T>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let blocks = adapter
            .blocks
            .iter()
            .map(|pairs| pairs.each_ref().map(|p| (leaf(&p.down), leaf(&p.up))))
            .collect();
        Self {
            blocks,
            scale: adapter.scale(),
        }
    }

    /// All handles in the order of [`LoraAdapter::named_tensors`].
    pub fn flat(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| b.iter().flat_map(|&(d, u)| [d, u]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ToyForward {
    pub eps: Var,
    /// Per block, `cells × n_present` attention at the pseudo-token columns.
    pub maps: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<T> {
    pub config: ToyConfig,
    pub schedule: NoiseSchedule,
    w_in: Tensor<T>,
    w_time: Tensor<T>,
    w_dec: Tensor<T>,
    pos: Tensor<T>,
    blocks: Vec<CrossAttention<T>>,
    pub lora: Option<LoraAdapter<T>>,
}

fn sinusoid(value: f64, dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = base.powf(-(i as f64) / half as f64);
        out[2 * i] = (value * freq).sin();
        out[2 * i + 1] = (value * freq).cos();
    }
    out
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let ToyConfig {
            latent_channels: c,
            d_model: d,
            context_dim: e,
            ..
        } = config;
        if c == 0 || e == 0 || d < 4 || d % 4 != 0 || config.cells() == 0 {
            return Err(validation(format!("invalid toy denoiser config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let w_in = Tensor::normal(d, c, std(c), &mut rng);
        let w_time = Tensor::normal(d, d, std(d), &mut rng);
        let w_dec = Tensor::normal(c, d, std(d), &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| CrossAttention {
                q: Tensor::normal(d, d, std(d), &mut rng),
                k: Tensor::normal(d, e, std(e), &mut rng),
                v: Tensor::normal(d, e, std(e), &mut rng),
                out: Tensor::normal(d, d, std(d), &mut rng),
            })
            .collect();
        let (gh, gw) = config.grid;
        let mut pos = Tensor::zeros(gh * gw, d);
        for y in 0..gh {
            for x in 0..gw {
                let row = pos.row_mut(y * gw + x);
                let code = sinusoid(y as f64, d / 2, 100.0)
                    .into_iter()
                    .chain(sinusoid(x as f64, d / 2, 100.0));
                for (dst, v) in row.iter_mut().zip(code) {
                    *dst = T::of(v);
                }
            }
        }
        Ok(Self {
            config,
            schedule: NoiseSchedule::default(),
            w_in,
            w_time,
            w_dec,
            pos,
            blocks,
            lora: None,
        })
    }

    /// Attach fresh adapters to every projection of every block: random
    /// down factors, zero up factors.
    pub fn attach_lora(mut self, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if self.blocks.is_empty() {
            return Err(Error::Unsupported("backend has no cross-attention to adapt".into()));
        }
        if rank == 0 {
            return Err(validation("adapter rank must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                b.projections().map(|w| LoraPair {
                    down: Tensor::uniform(rank, w.cols(), 1.0 / (w.cols() as f64).sqrt(), &mut rng),
                    up: Tensor::zeros(w.rows(), rank),
                })
            })
            .collect();
        self.lora = Some(LoraAdapter { rank, alpha, blocks });
        Ok(self)
    }

    pub fn base_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("w_in".to_string(), &self.w_in),
            ("w_time".to_string(), &self.w_time),
            ("w_dec".to_string(), &self.w_dec),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, w) in PROJECTIONS.iter().zip(block.projections()) {
                out.push((format!("block{b}.{name}"), w));
            }
        }
        out
    }

    pub fn base_parameter_count(&self) -> usize {
        self.base_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Digest of the frozen weights.
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.base_tensors() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn lora_vars(&self, g: &mut Graph<T>, trainable: bool) -> Option<LoraVars<T>> {
        self.lora.as_ref().map(|l| LoraVars::new(g, l, trainable))
    }

    fn embed_input(&self, z_t: &Tensor<T>, t: usize) -> Tensor<T> {
        let temb: Vec<T> = sinusoid(t as f64, self.config.d_model, 10_000.0)
            .into_iter()
            .map(T::of)
            .collect();
        let temb = Tensor::from_vec(1, self.config.d_model, temb).unwrap().matmul_bt(&self.w_time);
        let mut h = z_t.matmul_bt(&self.w_in);
        h.add_assign(&self.pos);
        for i in 0..h.rows() {
            for (a, &b) in h.row_mut(i).iter_mut().zip(temb.row(0)) {
                *a += b;
            }
        }
        h
    }

    fn project(g: &mut Graph<T>, x: Var, w: &Tensor<T>, lora: Option<(Var, Var)>, scale: T) -> Var {
        let wv = g.constant(w.clone());
        let base = g.matmul_bt(x, wv);
        match lora {
            Some((down, up)) => {
                let low = g.matmul_bt(x, down);
                let delta = g.matmul_bt(low, up);
                let delta = g.scale(delta, scale);
                g.add(base, delta)
            }
            None => base,
        }
    }

    /// Record a forward pass on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        z_t: &Tensor<T>,
        t: usize,
        prompt: &PromptVars,
        lora: Option<&LoraVars<T>>,
    ) -> Result<ToyForward> {
        let cells = self.config.cells();
        if z_t.shape() != (cells, self.config.latent_channels) {
            return Err(validation(format!(
                "latent is {:?}, backend expects {:?}",
                z_t.shape(),
                (cells, self.config.latent_channels)
            )));
        }
        if t >= self.schedule.steps() {
            return Err(validation(format!("timestep {t} outside 0..{}", self.schedule.steps())));
        }
        if g.value(prompt.context).cols() != self.config.context_dim {
            return Err(validation(format!(
                "prompt vectors have width {}, backend expects {}",
                g.value(prompt.context).cols(),
                self.config.context_dim
            )));
        }
        let inv_sqrt_d = T::of(1.0 / (self.config.d_model as f64).sqrt());
        let scale = lora.map_or(T::one(), |l| l.scale);
        let mut h = g.constant(self.embed_input(z_t, t));
        let mut delta: Option<Var> = None;
        let mut maps = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let pairs = lora.map(|l| l.blocks[b]);
            let q = Self::project(g, h, &block.q, pairs.map(|p| p[0]), scale);
            let k = Self::project(g, prompt.context, &block.k, pairs.map(|p| p[1]), scale);
            let v = Self::project(g, prompt.context, &block.v, pairs.map(|p| p[2]), scale);
            let scores = g.matmul_bt(q, k);
            let scores = g.scale(scores, inv_sqrt_d);
            let attn = g.softmax_rows(scores);
            if self.config.attention_taps {
                maps.push(g.select_cols(attn, &prompt.positions));
            }
            let mixed = g.matmul(attn, v);
            let o = Self::project(g, mixed, &block.out, pairs.map(|p| p[3]), scale);
            h = g.add(h, o);
            delta = Some(match delta {
                Some(d) => g.add(d, o),
                None => o,
            });
        }
        let x0 = match delta {
            Some(d) => {
                let w_dec = g.constant(self.w_dec.clone());
                g.matmul_bt(d, w_dec)
            }
            None => g.constant(Tensor::zeros(cells, self.config.latent_channels)),
        };
        let ab = self.schedule.alpha_bar(t);
        let inv = 1.0 / (1.0 - ab).sqrt();
        let shifted = g.constant(z_t.scaled(T::of(inv)));
        let x0_term = g.scale(x0, T::of(-ab.sqrt() * inv));
        let eps = g.add(shifted, x0_term);
        Ok(ToyForward { eps, maps })
    }

    fn tap_names(&self) -> Vec<String> {
        if self.config.attention_taps {
            (0..self.blocks.len()).map(|b| format!("block{b}.cross_attn")).collect()
        } else {
            Vec::new()
        }
    }

    /// Assemble an [`AttentionStack`] from forward-pass maps.
    pub fn stack_from_maps(&self, g: &Graph<T>, maps: &[Var], prompt: &PromptVars) -> Result<AttentionStack<T>> {
        let cells = self.config.cells();
        let present = prompt.present();
        let mut data = vec![T::zero(); maps.len() * prompt.num_channels * cells];
        for (l, &map) in maps.iter().enumerate() {
            let a = g.value(map);
            for (j, &m) in prompt.channels.iter().enumerate() {
                let base = (l * prompt.num_channels + m) * cells;
                for p in 0..cells {
                    data[base + p] = a[(p, j)];
                }
            }
        }
        let (h, w) = self.config.grid;
        AttentionStack::new(maps.len(), prompt.num_channels, h, w, data, present)
    }
}

impl<T: Scalar> DenoiserBackend<T> for ToyDenoiser<T> {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            versions: vec![PROTOCOL_VERSION],
            latent_cells: self.config.cells(),
            latent_channels: self.config.latent_channels,
            grid: self.config.grid,
            context_dim: self.config.context_dim,
            timesteps: self.schedule.steps(),
            taps: self.tap_names(),
        }
    }

    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, prompt: &PromptEmbedding<T>) -> Result<NoisePrediction<T>> {
        check_inputs(&self.capabilities(), z_t, t, prompt)?;
        let mut g = Graph::new();
        let lora = self.lora_vars(&mut g, false);
        let pv = PromptVars {
            context: g.constant(prompt.vectors.clone()),
            positions: prompt.positions.clone(),
            channels: prompt.channels.clone(),
            num_channels: prompt.num_channels,
        };
        let out = self.forward(&mut g, z_t, t, &pv, lora.as_ref())?;
        let attention = if self.config.attention_taps && !pv.channels.is_empty() {
            Some(self.stack_from_maps(&g, &out.maps, &pv)?)
        } else {
            None
        };
        Ok(NoisePrediction {
            eps: g.value(out.eps).clone(),
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn prompt(rng: &mut ChaCha8Rng, rows: usize, width: usize, positions: Vec<usize>, channels: usize) -> PromptEmbedding<f64> {
        PromptEmbedding {
            vectors: Tensor::normal(rows, width, 1.0, rng),
            channels: (0..positions.len()).collect(),
            positions,
            num_channels: channels,
        }
    }

    #[test]
    fn zero_initialized_adapters_are_bit_identical() {
        let base = ToyDenoiser::<f64>::new(ToyConfig::default()).unwrap();
        let adapted = base.clone().attach_lora(4, 4.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let z = Tensor::uniform(256, 4, 3.0, &mut rng);
            let t = rng.random_range(0..1000);
            let p = prompt(&mut rng, 7, 16, vec![4, 5, 6], 3);
            let a = base.predict_noise(&z, t, &p).unwrap();
            let b = adapted.predict_noise(&z, t, &p).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adapter_parameter_count_matches_hand_count() {
        let cfg = ToyConfig::default();
        let d = cfg.d_model;
        let e = cfg.context_dim;
        let r = 4;
        let model = ToyDenoiser::<f32>::new(cfg).unwrap().attach_lora(r, 4.0, 0).unwrap();
        let per_block = r * (d + d) + r * (e + d) + r * (e + d) + r * (d + d);
        assert_eq!(model.lora.as_ref().unwrap().trainable_parameters(), cfg.blocks * per_block);
        assert!(model.base_parameter_count() <= 2_000_000);
    }

    #[test]
    fn no_cross_attention_cannot_take_adapters() {
        let cfg = ToyConfig {
            blocks: 0,
            ..ToyConfig::default()
        };
        let err = ToyDenoiser::<f32>::new(cfg).unwrap().attach_lora(4, 4.0, 0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let model = ToyDenoiser::<f64>::new(ToyConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Every prompt row is a pseudo-token, so the gathered maps are the
        // full attention rows.
        let p = prompt(&mut rng, 3, 16, vec![0, 1, 2], 3);
        let z = Tensor::normal(256, 4, 1.0, &mut rng);
        let att = model.predict_noise(&z, 500, &p).unwrap().attention.unwrap();
        assert_eq!(att.layers, 3);
        for l in 0..3 {
            for cell in 0..256 {
                let s: f64 = (0..3).map(|m| att.map(l, m)[cell]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!((0..3).all(|m| att.map(l, m)[cell] >= 0.0));
            }
        }
    }

    #[test]
    fn forward_is_deterministic_across_constructions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = prompt(&mut rng, 6, 16, vec![4, 5], 2);
        let z = Tensor::<f64>::normal(256, 4, 1.0, &mut rng);
        let a = ToyDenoiser::<f32>::new(ToyConfig::default()).unwrap();
        let b = ToyDenoiser::<f32>::new(ToyConfig::default()).unwrap();
        let pf = PromptEmbedding {
            vectors: p.vectors.cast::<f32>(),
            positions: p.positions.clone(),
            channels: p.channels.clone(),
            num_channels: 2,
        };
        let za = z.cast::<f32>();
        assert_eq!(
            a.predict_noise(&za, 10, &pf).unwrap(),
            b.predict_noise(&za, 10, &pf).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = ToyDenoiser::<f64>::new(ToyConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = prompt(&mut rng, 5, 16, vec![4], 1);
        assert!(model.predict_noise(&Tensor::zeros(255, 4), 0, &p).is_err());
        assert!(model.predict_noise(&Tensor::zeros(256, 4), 1000, &p).is_err());
        let narrow = prompt(&mut rng, 5, 8, vec![4], 1);
        assert!(model.predict_noise(&Tensor::zeros(256, 4), 0, &narrow).is_err());
    }

    #[test]
    fn noise_gradient_wrt_prompt_matches_finite_differences() {
        let model = ToyDenoiser::<f64>::new(ToyConfig {
            grid: (4, 4),
            ..ToyConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ctx = Tensor::<f64>::normal(6, 16, 1.0, &mut rng);
        let z = Tensor::normal(16, 4, 1.0, &mut rng);
        let noise = Tensor::normal(16, 4, 1.0, &mut rng);
        let loss = |c: &Tensor<f64>| {
            let mut g = Graph::new();
            let context = g.param(c.clone());
            let pv = PromptVars {
                context,
                positions: vec![4, 5],
                channels: vec![0, 1],
                num_channels: 2,
            };
            let out = model.forward(&mut g, &z, 300, &pv, None).unwrap();
            let l = g.mse(out.eps, noise.clone());
            (g, l, context)
        };
        let (g, l, context) = loss(&ctx);
        let grad = g.backward(l).get(context).unwrap().clone();
        let h = 1e-5;
        for i in 0..ctx.len() {
            let mut up = ctx.clone();
            up.data_mut()[i] += h;
            let mut down = ctx.clone();
            down.data_mut()[i] -= h;
            let (gu, lu, _) = loss(&up);
            let (gd, ld, _) = loss(&down);
            let fd = (gu.scalar(lu) - gd.scalar(ld)) / (2.0 * h);
            let a = grad.data()[i];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-8), "{i}: fd {fd} analytic {a}");
        }
    }
}

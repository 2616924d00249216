//! Hybrid codes, the randomized multi-source protocol, evaluation suites and
//! ancestral sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserBackend, NoiseSchedule, PatchAutoencoder};
use crate::discovery::PromptCode;
use crate::error::{validation, Error, Result};
use crate::feature_io::RgbImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::token_space::PromptEmbedding;

pub const DEFAULT_SUITE_SIZE: usize = 500;
pub const DEFAULT_POOL_SIZE: usize = 500;
pub const MAX_SOURCES: usize = 4;

/// Replace each named channel of `base` with the donor's pair there.
pub fn compose(base: &PromptCode, donors: &[(PromptCode, usize)]) -> Result<PromptCode> {
    let mut out = base.clone();
    for (donor, m) in donors {
        if donor.channels() != base.channels() {
            return Err(validation(format!(
                "donor has {} channels, base has {}",
                donor.channels(),
                base.channels()
            )));
        }
        if *m >= base.channels() {
            return Err(validation(format!("channel {m} out of range 0..{}", base.channels())));
        }
        let k = donor
            .split(*m)
            .ok_or_else(|| validation(format!("donor {donor} has no channel {m} to give")))?;
        out.set(*m, Some(k));
    }
    Ok(out)
}

/// Channel order of the multi-source protocol: each donor pops a uniformly
/// chosen index from the channels not yet replaced.
pub fn pop_channels<R: Rng + ?Sized>(channels: usize, donors: usize, rng: &mut R) -> Result<Vec<usize>> {
    if donors > channels {
        return Err(validation(format!("{donors} donors but only {channels} channels")));
    }
    let mut idxs: Vec<usize> = (0..channels).collect();
    Ok((0..donors)
        .map(|_| {
            let i = rng.random_range(0..idxs.len());
            idxs.remove(i)
        })
        .collect())
}

/// Apply the protocol to one base and its donors.
pub fn compose_random<R: Rng + ?Sized>(
    base: &PromptCode,
    donors: &[PromptCode],
    rng: &mut R,
) -> Result<(PromptCode, Vec<usize>)> {
    let chans = pop_channels(base.channels(), donors.len(), rng)?;
    let pairs: Vec<(PromptCode, usize)> = donors.iter().cloned().zip(chans.iter().copied()).collect();
    Ok((compose(base, &pairs)?, chans))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorRecord {
    pub image_id: String,
    pub channel: usize,
    pub code: PromptCode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub code: PromptCode,
    pub base_id: String,
    pub base_code: PromptCode,
    pub donors: Vec<DonorRecord>,
    /// Base plus donors.
    pub sources: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSuite {
    pub seed: u64,
    pub n_pool: usize,
    pub base_pool: Vec<String>,
    pub donor_pool: Vec<String>,
    pub items: Vec<SuiteItem>,
}

/// Sample `n` hybrids from `sources_per_item` sources each.
///
/// Images are shuffled once and split into disjoint base and donor pools of
/// `n_pool` each. Every item draws a base from the base pool; each donor
/// pops a channel and is drawn, without repetition within the item, among
/// donor-pool images that have that channel.
pub fn sample_composition_suite(
    codes: &[(String, PromptCode)],
    n: usize,
    n_pool: usize,
    sources_per_item: usize,
    seed: u64,
) -> Result<CompositionSuite> {
    if !(1..=MAX_SOURCES).contains(&sources_per_item) {
        return Err(validation(format!("sources_per_item must be in 1..={MAX_SOURCES}")));
    }
    if n == 0 || n_pool == 0 {
        return Err(validation("suite and pool sizes must be positive"));
    }
    if 2 * n_pool > codes.len() {
        return Err(Error::Capacity(format!(
            "two disjoint pools of {n_pool} need {} images, have {}",
            2 * n_pool,
            codes.len()
        )));
    }
    let channels = codes[0].1.channels();
    if codes.iter().any(|(_, c)| c.channels() != channels) {
        return Err(validation("codes come from different dictionaries"));
    }
    if sources_per_item - 1 > n_pool || sources_per_item - 1 > channels {
        return Err(Error::Capacity(format!(
            "{} donors per item exceed the donor pool or the channel count",
            sources_per_item - 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..codes.len()).collect();
    order.shuffle(&mut rng);
    let base_pool = &order[..n_pool];
    let donor_pool = &order[n_pool..2 * n_pool];
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let b = base_pool[rng.random_range(0..n_pool)];
        let (base_id, base_code) = &codes[b];
        let chans = pop_channels(channels, sources_per_item - 1, &mut rng)?;
        let mut used = Vec::new();
        let mut donors = Vec::new();
        for m in chans {
            let candidates: Vec<usize> = donor_pool
                .iter()
                .copied()
                .filter(|d| !used.contains(d) && codes[*d].1.is_present(m))
                .collect();
            if candidates.is_empty() {
                return Err(Error::Capacity(format!("no unused donor has channel {m}")));
            }
            let d = candidates[rng.random_range(0..candidates.len())];
            used.push(d);
            donors.push(DonorRecord {
                image_id: codes[d].0.clone(),
                channel: m,
                code: codes[d].1.clone(),
            });
        }
        let pairs: Vec<(PromptCode, usize)> = donors.iter().map(|d| (d.code.clone(), d.channel)).collect();
        items.push(SuiteItem {
            code: compose(base_code, &pairs)?,
            base_id: base_id.clone(),
            base_code: base_code.clone(),
            donors,
            sources: sources_per_item,
        });
    }
    Ok(CompositionSuite {
        seed,
        n_pool,
        base_pool: base_pool.iter().map(|&i| codes[i].0.clone()).collect(),
        donor_pool: donor_pool.iter().map(|&i| codes[i].0.clone()).collect(),
        items,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            steps: crate::denoiser::schedule::DEFAULT_SAMPLING_STEPS,
            seed: 0,
        }
    }
}

/// Words of the prompt with pseudo-tokens written as their pairs.
pub fn prompt_text(template: &[String], code: &PromptCode, style: Option<&str>) -> String {
    let mut parts: Vec<String> = template.to_vec();
    parts.push(code.to_string());
    if let Some(s) = style.filter(|s| !s.trim().is_empty()) {
        parts.push(s.trim().to_string());
    }
    parts.join(" ")
}

/// Ancestral DDPM sampling from pure noise.
pub fn sample_latent<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    prompt: &PromptEmbedding<T>,
    opts: &SamplerOptions,
) -> Result<Tensor<T>> {
    let caps = backend.capabilities();
    let schedule = if caps.timesteps == crate::denoiser::schedule::DEFAULT_TIMESTEPS {
        NoiseSchedule::default()
    } else {
        NoiseSchedule::linear(caps.timesteps, 1e-4, 0.02)
    };
    let (rows, cols) = caps.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut z = Tensor::normal(rows, cols, 1.0, &mut rng);
    let ts = schedule.sampling_timesteps(opts.steps);
    for (i, &t) in ts.iter().enumerate() {
        let eps = backend.predict_noise(&z, t, prompt)?.eps;
        let x0 = schedule.predict_x0(&z, &eps, t);
        let (mean, std) = schedule.posterior(&z, &x0, t, ts.get(i + 1).copied());
        z = if std > 0.0 {
            let noise = Tensor::<T>::normal(rows, cols, 1.0, &mut rng);
            mean.zip_map(&noise, |m, e| m + T::of(std) * e)
        } else {
            mean
        };
    }
    if !z.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: "sampling produced a non-finite latent".into(),
        });
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation<T> {
    pub prompt: String,
    pub latent: Tensor<T>,
    pub image: RgbImage,
}

/// Sample and decode one image.
pub fn generate<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    prompt: &PromptEmbedding<T>,
    prompt_words: String,
    autoencoder: &PatchAutoencoder,
    opts: &SamplerOptions,
) -> Result<Generation<T>> {
    let caps = backend.capabilities();
    let latent = sample_latent(backend, prompt, opts)?;
    if caps.grid.0 * caps.grid.1 != caps.latent_cells {
        return Err(Error::Unsupported("latent cells do not form the declared grid".into()));
    }
    let image = autoencoder.decode(&latent, caps.grid)?;
    Ok(Generation {
        prompt: prompt_words,
        latent,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(k: &[usize]) -> PromptCode {
        PromptCode::full(k).unwrap()
    }

    #[test]
    fn replacing_with_equal_pair_is_a_no_op() {
        let base = code(&[1, 2, 3]);
        assert_eq!(compose(&base, &[(code(&[4, 2, 1]), 1)]).unwrap(), base);
    }

    #[test]
    fn replaces_only_named_channels() {
        let base = code(&[1, 2, 3, 4]);
        let out = compose(&base, &[(code(&[9, 9, 9, 9]), 2), (code(&[7, 7, 7, 7]), 0)]).unwrap();
        assert_eq!(out, code(&[7, 2, 9, 4]));
        assert_eq!(out.to_string(), "(0,7) (1,2) (2,9) (3,4)");
    }

    #[test]
    fn absent_donor_channel_is_rejected() {
        let donor = PromptCode::new(vec![Some(1), None, Some(2)]).unwrap();
        assert!(compose(&code(&[1, 1, 1]), &[(donor, 1)]).is_err());
    }

    #[test]
    fn popped_channels_never_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let mut c = pop_channels(6, 6, &mut rng).unwrap();
            c.sort();
            assert_eq!(c, (0..6).collect::<Vec<_>>());
        }
        assert!(pop_channels(2, 3, &mut rng).is_err());
    }

    fn corpus(n: usize) -> Vec<(String, PromptCode)> {
        (0..n).map(|i| (format!("img{i}"), code(&[i % 3 + 1, i % 4 + 1, i % 5 + 1]))).collect()
    }

    #[test]
    fn single_source_suite_is_unmodified() {
        let suite = sample_composition_suite(&corpus(10), 20, 5, 1, 3).unwrap();
        for item in &suite.items {
            assert_eq!(item.code, item.base_code);
            assert!(item.donors.is_empty());
        }
    }

    #[test]
    fn pools_are_disjoint_and_suites_reproducible() {
        let c = corpus(12);
        let a = sample_composition_suite(&c, 30, 6, 4, 9).unwrap();
        let b = sample_composition_suite(&c, 30, 6, 4, 9).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(a.base_pool.iter().all(|id| !a.donor_pool.contains(id)));
        for item in &a.items {
            assert!(a.base_pool.contains(&item.base_id));
            let mut ids: Vec<&String> = item.donors.iter().map(|d| &d.image_id).collect();
            assert!(ids.iter().all(|id| a.donor_pool.contains(id)));
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 3);
        }
    }

    #[test]
    fn oversized_pools_are_a_capacity_error() {
        assert!(matches!(
            sample_composition_suite(&corpus(5), 10, 3, 2, 0),
            Err(Error::Capacity(_))
        ));
        assert!(sample_composition_suite(&corpus(5), 10, 2, 5, 0).is_err());
    }

    #[test]
    fn prompt_text_lists_pairs_then_style() {
        let words: Vec<String> = ["a", "photo", "of", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            prompt_text(&words, &code(&[2, 1]), Some("pencil drawing")),
            "a photo of a (0,2) (1,1) pencil drawing"
        );
    }
}

//! Synthetic creature corpus for desk-scale runs.
//!
//! Each 32×32 image shows a two-part creature (a small head above a larger
//! body) on one of two dark backgrounds. Head and body colors come from a
//! species; hybrids mix species per part. Everything is aligned to the
//! 2-pixel patch grid so patches are single-colored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::PatchAutoencoder;
use crate::discovery::{downsample_masks, fit_hierarchy, tag_image, PartMaskSet, PromptCode, SubConceptDictionary};
use crate::error::Result;
use crate::feature_io::{ExtractorAdapter, FeatureMap, RgbImage, StubExtractor};
use crate::kmeans::KMeansOptions;
use crate::scalar::Scalar;
use crate::training::TrainSample;

pub const BACKGROUNDS: [[f64; 3]; 2] = [[0.10, 0.12, 0.30], [0.10, 0.25, 0.15]];
pub const HEADS: [[f64; 3]; 2] = [[0.95, 0.25, 0.15], [0.95, 0.55, 0.10]];
pub const BODIES: [[f64; 3]; 2] = [[0.95, 0.95, 0.70], [0.70, 0.90, 0.95]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTaskConfig {
    pub images: usize,
    pub size: usize,
    pub patch: usize,
    pub feature_dim: usize,
    pub bandwidth: f64,
    pub extractor_seed: u64,
    pub layout_seed: u64,
    pub parts: usize,
    pub splits: usize,
    pub discovery_seed: u64,
    pub kmeans: KMeansOptions,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            images: 8,
            size: 32,
            patch: 2,
            feature_dim: 128,
            bandwidth: 2.0,
            extractor_seed: 11,
            layout_seed: 5,
            parts: 2,
            splits: 2,
            discovery_seed: 0,
            kmeans: KMeansOptions {
                n_init: 10,
                ..KMeansOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreatureSpec {
    pub background: usize,
    pub head: usize,
    pub body: usize,
    /// Offset of the creature in pixels (multiples of the patch size).
    pub dx: i32,
    pub dy: i32,
}

fn to_rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v * 255.0).round() as u8)
}

/// Draw a creature. Head and body rectangles scale with the image size.
pub fn render(spec: &CreatureSpec, size: usize) -> RgbImage {
    let mut img = RgbImage::solid(size, size, to_rgb(BACKGROUNDS[spec.background]));
    let s = size as i32;
    let fill = |img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, rgb: [u8; 3]| {
        for y in y0.max(0)..y1.min(s) {
            for x in x0.max(0)..x1.min(s) {
                img.set_pixel(x as usize, y as usize, rgb);
            }
        }
    };
    let u = s / 16;
    let (dx, dy) = (spec.dx, spec.dy);
    fill(&mut img, 6 * u + dx, 3 * u + dy, 10 * u + dx, 6 * u + dy, to_rgb(HEADS[spec.head]));
    fill(&mut img, 5 * u + dx, 6 * u + dy, 11 * u + dx, 11 * u + dy, to_rgb(BODIES[spec.body]));
    img
}

/// The corpus layout: backgrounds alternate, species change every two
/// images, each image gets a small random offset. Head and body species
/// always agree.
pub fn corpus_specs(cfg: &ToyTaskConfig) -> Vec<CreatureSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.layout_seed);
    let step = cfg.patch as i32;
    (0..cfg.images)
        .map(|i| {
            let species = (i / 2) % 2;
            CreatureSpec {
                background: i % 2,
                head: species,
                body: species,
                dx: rng.random_range(-2..=2) * step,
                dy: rng.random_range(-1..=1) * step,
            }
        })
        .collect()
}

/// Images, features, the discovered dictionary and the tagged codes.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub config: ToyTaskConfig,
    pub specs: Vec<CreatureSpec>,
    pub ids: Vec<String>,
    pub images: Vec<RgbImage>,
    pub extractor: StubExtractor,
    pub maps: Vec<FeatureMap>,
    pub dictionary: SubConceptDictionary,
    pub codes: Vec<PromptCode>,
    pub masks: Vec<PartMaskSet>,
}

impl ToyTask {
    pub fn build(cfg: ToyTaskConfig) -> Result<Self> {
        let specs = corpus_specs(&cfg);
        let ids: Vec<String> = (0..specs.len()).map(|i| format!("creature_{i:02}")).collect();
        let images: Vec<RgbImage> = specs.iter().map(|s| render(s, cfg.size)).collect();
        let extractor = StubExtractor::new(cfg.patch, cfg.feature_dim, cfg.extractor_seed, cfg.bandwidth)?;
        let maps = ids
            .iter()
            .zip(&images)
            .map(|(id, img)| extractor.extract(id, img))
            .collect::<Result<Vec<_>>>()?;
        let mut dictionary = fit_hierarchy(
            &maps,
            "toy-creatures",
            cfg.parts,
            cfg.splits,
            cfg.discovery_seed,
            &cfg.kmeans,
        )?;
        dictionary.metadata.extractor = Some(extractor.info());
        let (codes, masks) = maps
            .iter()
            .map(|fm| tag_image(fm, &dictionary))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self {
            config: cfg,
            specs,
            ids,
            images,
            extractor,
            maps,
            dictionary,
            codes,
            masks,
        })
    }

    pub fn autoencoder(&self) -> PatchAutoencoder {
        PatchAutoencoder::new(self.config.patch)
    }

    pub fn latent_grid(&self) -> (usize, usize) {
        self.autoencoder().grid_for(self.config.size, self.config.size)
    }

    /// Training samples with masks resampled to `grid`.
    pub fn samples<T: Scalar>(&self, grid: (usize, usize)) -> Result<Vec<TrainSample<T>>> {
        let ae = self.autoencoder();
        self.images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                Ok(TrainSample {
                    image_id: self.ids[i].clone(),
                    latent: ae.encode(img)?,
                    latent_grid: self.latent_grid(),
                    code: self.codes[i].clone(),
                    masks: downsample_masks(&self.masks[i], grid)?,
                })
            })
            .collect()
    }
}

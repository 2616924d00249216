//! Exact-match and centroid-cosine scoring of generated images, suite
//! aggregation, embedding similarity and attention diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composition::SuiteItem;
use crate::discovery::{tag_image, PartMaskSet, PromptCode, SubConceptDictionary};
use crate::error::{validation, Error, Result};
use crate::feature_io::{gray_png, ExtractorAdapter, RgbImage};
use crate::losses::NormalizedAttention;
use crate::psfm::{self, Block};
use crate::scalar::Scalar;
use crate::tensor::cosine;

/// Channelwise agreement between a requested and a recovered code, or the
/// mean over many such comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub emr: f64,
    pub cosim: f64,
    /// Fraction of comparisons matching at each channel.
    pub channel_match: Vec<f64>,
    pub channel_cosim: Vec<f64>,
    pub n_samples: usize,
}

/// Compare two codes channel by channel.
///
/// Both present: match when the splits agree, cosine of the two split
/// centroids. One absent: mismatch with cosine 0. Both absent: match with
/// cosine 1.
pub fn emr_cosim(a: &PromptCode, b: &PromptCode, dict: &SubConceptDictionary) -> Result<EvalResult> {
    a.check_against(dict.channels(), dict.splits)?;
    b.check_against(dict.channels(), dict.splits)?;
    let (channel_match, channel_cosim): (Vec<f64>, Vec<f64>) = (0..dict.channels())
        .map(|m| match (a.split(m), b.split(m)) {
            (Some(ka), Some(kb)) => (
                f64::from(u8::from(ka == kb)),
                if ka == kb {
                    1.0
                } else {
                    cosine_f64(dict.split_centroid(m, ka), dict.split_centroid(m, kb))
                },
            ),
            (None, None) => (1.0, 1.0),
            _ => (0.0, 0.0),
        })
        .unzip();
    let n = channel_match.len() as f64;
    Ok(EvalResult {
        emr: channel_match.iter().sum::<f64>() / n,
        cosim: channel_cosim.iter().sum::<f64>() / n,
        channel_match,
        channel_cosim,
        n_samples: 1,
    })
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let wide = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    cosine(&wide(a), &wide(b))
}

/// Tag an image against a frozen dictionary.
pub fn predict_code(image: &RgbImage, dict: &SubConceptDictionary, extractor: &dyn ExtractorAdapter) -> Result<PromptCode> {
    let fm = extractor.extract("generated", image)?;
    Ok(tag_image(&fm, dict)?.0)
}

/// Sample-weighted mean of results.
pub fn aggregate(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results.first().ok_or_else(|| validation("nothing to aggregate"))?;
    let channels = first.channel_match.len();
    if results.iter().any(|r| r.channel_match.len() != channels) {
        return Err(validation("results cover different channel counts"));
    }
    let total: usize = results.iter().map(|r| r.n_samples).sum();
    let wmean = |f: &dyn Fn(&EvalResult) -> f64| {
        results.iter().map(|r| f(r) * r.n_samples as f64).sum::<f64>() / total as f64
    };
    Ok(EvalResult {
        emr: wmean(&|r| r.emr),
        cosim: wmean(&|r| r.cosim),
        channel_match: (0..channels).map(|m| wmean(&|r| r.channel_match[m])).collect(),
        channel_cosim: (0..channels).map(|m| wmean(&|r| r.channel_cosim[m])).collect(),
        n_samples: total,
    })
}

/// A metric value or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MetricStatus {
    Ok { value: f64 },
    Unavailable { reason: String },
}

impl MetricStatus {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricStatus::Ok { value } => Some(*value),
            MetricStatus::Unavailable { .. } => None,
        }
    }

    pub fn unavailable(reason: impl Into<String>) -> Self {
        MetricStatus::Unavailable { reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    /// `None` when every sample failed.
    pub overall: Option<EvalResult>,
    /// Keyed by the number of source concepts per item.
    pub per_sources: BTreeMap<usize, EvalResult>,
    pub failures: Vec<SampleFailure>,
    pub fid: MetricStatus,
}

/// Score every suite item: render it with `render`, tag the result and
/// compare with the requested code. Backend and numeric failures are
/// recorded and excluded; any other error aborts.
pub fn eval_suite(
    items: &[SuiteItem],
    dict: &SubConceptDictionary,
    extractor: &dyn ExtractorAdapter,
    mut render: impl FnMut(usize, &SuiteItem) -> Result<RgbImage>,
) -> Result<SuiteReport> {
    if items.is_empty() {
        return Err(validation("empty evaluation suite"));
    }
    let mut scored: Vec<(usize, EvalResult)> = Vec::new();
    let mut failures = Vec::new();
    for (i, item) in items.iter().enumerate() {
        item.code.check_against(dict.channels(), dict.splits)?;
        match render(i, item) {
            Ok(img) => {
                let got = predict_code(&img, dict, extractor)?;
                scored.push((item.sources, emr_cosim(&item.code, &got, dict)?));
            }
            Err(e) if e.is_dependency() || matches!(e, Error::NonFinite { .. }) => failures.push(SampleFailure {
                index: i,
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let mut groups: BTreeMap<usize, Vec<EvalResult>> = BTreeMap::new();
    for (s, r) in &scored {
        groups.entry(*s).or_default().push(r.clone());
    }
    let all: Vec<EvalResult> = scored.into_iter().map(|(_, r)| r).collect();
    Ok(SuiteReport {
        overall: if all.is_empty() { None } else { Some(aggregate(&all)?) },
        per_sources: groups
            .into_iter()
            .map(|(s, rs)| Ok((s, aggregate(&rs)?)))
            .collect::<Result<_>>()?,
        failures,
        fid: MetricStatus::unavailable("FID needs an Inception network, which is not bundled"),
    })
}

/// Boundary to an image-embedding network.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, image: &RgbImage) -> Result<Vec<f64>>;
}

/// Mean cosine between the i-th vectors of `a` and `b`.
pub fn mean_paired_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(validation("paired cosine needs two equally long, non-empty sets"));
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(validation("embeddings differ in width"));
        }
        sum += cosine(x, y);
    }
    Ok(sum / a.len() as f64)
}

/// Mean cosine between paired real and generated image embeddings.
pub fn embedding_similarity(
    real: &[RgbImage],
    generated: &[RgbImage],
    embedder: Option<&dyn ImageEmbedder>,
) -> Result<MetricStatus> {
    let Some(embedder) = embedder else {
        return Ok(MetricStatus::unavailable("no image embedder configured"));
    };
    let embed = |imgs: &[RgbImage]| imgs.iter().map(|i| embedder.embed(i)).collect::<Result<Vec<_>>>();
    Ok(MetricStatus::Ok {
        value: mean_paired_cosine(&embed(real)?, &embed(generated)?)?,
    })
}

/// Mean over present channels of the IoU between the cells where the
/// channel wins the argmax of the normalized attention and its mask.
pub fn argmax_iou<T: Scalar>(att: &NormalizedAttention<T>, masks: &PartMaskSet) -> Result<f64> {
    if (att.h, att.w) != (masks.grid_h, masks.grid_w) || att.channels != masks.channels() {
        return Err(validation("attention and masks disagree in grid or channel count"));
    }
    let winners = att.argmax_channels();
    let present: Vec<usize> = (0..att.channels).filter(|&m| att.present[m]).collect();
    if present.is_empty() {
        return Err(validation("no present channel to score"));
    }
    let total: f64 = present
        .iter()
        .map(|&m| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (p, &w) in winners.iter().enumerate() {
                let (a, b) = (w == m, masks.masks[m][p]);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// One grayscale rendering of a channel's normalized attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub channel: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        gray_png(self.width, self.height, &self.pixels)
    }
}

/// Heatmaps of the present channels; a weight of 1 renders as 255.
pub fn render_heatmaps<T: Scalar>(att: &NormalizedAttention<T>) -> Vec<Heatmap> {
    (0..att.channels)
        .filter(|&m| att.present[m])
        .map(|m| Heatmap {
            channel: m,
            width: att.w,
            height: att.h,
            pixels: att
                .channel(m)
                .iter()
                .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        })
        .collect()
}

/// The normalized attention as a PSFM block, `h × w × channels`.
pub fn attention_block<T: Scalar>(att: &NormalizedAttention<T>) -> Result<Block> {
    let n = att.cells();
    let mut data = Vec::with_capacity(n * att.channels);
    for p in 0..n {
        for m in 0..att.channels {
            data.push(att.data[m * n + p].as_f32());
        }
    }
    Block::new(att.h, att.w, att.channels, data)
}

/// Write `channel_{m}.png` per present channel and `attention.psfm`.
pub fn dump_attention<T: Scalar>(att: &NormalizedAttention<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for hm in render_heatmaps(att) {
        let path = dir.join(format!("channel_{}.png", hm.channel));
        fs::write(&path, hm.to_png()?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let raw = dir.join("attention.psfm");
    psfm::write_block(&raw, &attention_block(att)?)?;
    written.push(raw);
    Ok(written)
}

//! Three-tier sub-concept discovery over pooled patch features.
//!
//! 1. two-way k-means over every patch splits foreground from background;
//! 2. M-way k-means over foreground patches gives class-agnostic parts;
//! 3. K-way k-means inside the background and inside each part gives the
//!    fine splits.
//!
//! Channel 0 is always the background; channels `1..=M` are the parts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Error, Result};
use crate::feature_io::{ExtractorInfo, FeatureMap};
use crate::kmeans::{kmeans, nearest, KMeansError, KMeansOptions};
use crate::psfm::{self, Block};

pub const BACKGROUND_CHANNEL: usize = 0;

/// The (channel, split) description of one image or one hybrid.
///
/// Splits are 1-based. A channel without a split is absent (occluded or
/// not found in the image) and is left out of prompts, masks and losses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptCode {
    splits: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PromptCodeRepr {
    channels: usize,
    pairs: Vec<(usize, usize)>,
}

impl Serialize for PromptCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PromptCodeRepr {
            channels: self.channels(),
            pairs: self.pairs().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PromptCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PromptCodeRepr::deserialize(d)?;
        PromptCode::from_pairs(repr.channels, &repr.pairs).map_err(serde::de::Error::custom)
    }
}

impl PromptCode {
    pub fn new(splits: Vec<Option<usize>>) -> Result<Self> {
        if splits.is_empty() {
            return Err(validation("prompt code needs at least one channel"));
        }
        if splits.contains(&Some(0)) {
            return Err(validation("split indices are 1-based"));
        }
        Ok(Self { splits })
    }

    /// Every channel present.
    pub fn full(splits: &[usize]) -> Result<Self> {
        Self::new(splits.iter().map(|&k| Some(k)).collect())
    }

    /// From present `(channel, split)` pairs, which must be strictly
    /// increasing in channel.
    pub fn from_pairs(channels: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut splits = vec![None; channels];
        let mut last = None;
        for &(m, k) in pairs {
            if m >= channels {
                return Err(validation(format!("channel {m} out of range 0..{channels}")));
            }
            if last.is_some_and(|l| m <= l) {
                return Err(validation("channels must be strictly increasing"));
            }
            last = Some(m);
            splits[m] = Some(k);
        }
        Self::new(splits)
    }

    pub fn channels(&self) -> usize {
        self.splits.len()
    }

    pub fn split(&self, m: usize) -> Option<usize> {
        self.splits.get(m).copied().flatten()
    }

    pub fn is_present(&self, m: usize) -> bool {
        self.split(m).is_some()
    }

    pub fn present(&self) -> Vec<bool> {
        self.splits.iter().map(Option::is_some).collect()
    }

    pub fn present_channels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.splits.len()).filter(|&m| self.splits[m].is_some())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.splits
            .iter()
            .enumerate()
            .filter_map(|(m, k)| k.map(|k| (m, k)))
    }

    pub fn splits(&self) -> &[Option<usize>] {
        &self.splits
    }

    pub(crate) fn set(&mut self, m: usize, k: Option<usize>) {
        self.splits[m] = k;
    }

    /// Check the code against a dictionary's channel and split counts.
    pub fn check_against(&self, channels: usize, splits: usize) -> Result<()> {
        if self.channels() != channels {
            return Err(validation(format!(
                "code has {} channels, dictionary has {channels}",
                self.channels()
            )));
        }
        for (m, k) in self.pairs() {
            if k == 0 || k > splits {
                return Err(validation(format!("pair ({m},{k}) outside splits 1..={splits}")));
            }
        }
        Ok(())
    }

    /// Parse `"(0,3) (1,7)"`; absent channels are simply omitted.
    pub fn parse(channels: usize, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for tok in text.split_whitespace() {
            let inner = tok
                .strip_prefix('(')
                .and_then(|t| t.strip_suffix(')'))
                .ok_or_else(|| validation(format!("bad pair token {tok:?}")))?;
            let (m, k) = inner
                .split_once(',')
                .ok_or_else(|| validation(format!("bad pair token {tok:?}")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| validation(format!("bad number in {tok:?}")))
            };
            pairs.push((parse(m)?, parse(k)?));
        }
        Self::from_pairs(channels, &pairs)
    }
}

impl fmt::Display for PromptCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (m, k) in self.pairs() {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "({m},{k})")?;
            first = false;
        }
        Ok(())
    }
}

/// Binary location masks, one per channel, on a patch or attention grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartMaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub masks: Vec<Vec<bool>>,
    pub present: Vec<bool>,
}

impl PartMaskSet {
    /// Build from one channel label per cell.
    pub fn from_labels(grid_h: usize, grid_w: usize, channels: usize, labels: &[usize]) -> Self {
        assert_eq!(labels.len(), grid_h * grid_w, "label grid size");
        let mut masks = vec![vec![false; grid_h * grid_w]; channels];
        for (p, &m) in labels.iter().enumerate() {
            masks[m][p] = true;
        }
        let present = masks.iter().map(|mask| mask.iter().any(|&b| b)).collect();
        Self {
            grid_h,
            grid_w,
            masks,
            present,
        }
    }

    pub fn channels(&self) -> usize {
        self.masks.len()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Channel owning each cell, or `None` where no mask is set.
    pub fn labels(&self) -> Vec<Option<usize>> {
        (0..self.cells())
            .map(|p| (0..self.channels()).find(|&m| self.masks[m][p]))
            .collect()
    }

    /// Disjoint, covering, and presence flags consistent with the masks.
    pub fn validate(&self) -> Result<()> {
        if self.present.len() != self.masks.len() {
            return Err(validation("mask presence length mismatch"));
        }
        for (m, mask) in self.masks.iter().enumerate() {
            if mask.len() != self.cells() {
                return Err(validation(format!("mask {m} has wrong size")));
            }
            if mask.iter().any(|&b| b) != self.present[m] {
                return Err(validation(format!("presence flag of channel {m} disagrees with mask")));
            }
        }
        for p in 0..self.cells() {
            let owners = self.masks.iter().filter(|mask| mask[p]).count();
            if owners != 1 {
                return Err(validation(format!("cell {p} is owned by {owners} channels")));
            }
        }
        Ok(())
    }

    /// Drop a channel: clear its mask and presence. The masks no longer
    /// cover the grid afterwards.
    pub fn without_channel(&self, m: usize) -> Self {
        let mut out = self.clone();
        out.masks[m].iter_mut().for_each(|b| *b = false);
        out.present[m] = false;
        out
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for mask in &mut out.masks {
            for row in mask.chunks_mut(self.grid_w) {
                row.reverse();
            }
        }
        out
    }
}

/// Nearest-neighbour resampling of categorical masks.
///
/// Every target cell copies the label of the source cell under its centre,
/// so disjointness and coverage carry over; presence is recomputed.
pub fn downsample_masks(pm: &PartMaskSet, target: (usize, usize)) -> Result<PartMaskSet> {
    let (th, tw) = target;
    if th < 2 || tw < 2 {
        return Err(validation("mask target grid must be at least 2x2"));
    }
    let (sh, sw) = (pm.grid_h, pm.grid_w);
    let mut masks = vec![vec![false; th * tw]; pm.channels()];
    for i in 0..th {
        let si = ((2 * i + 1) * sh) / (2 * th);
        for j in 0..tw {
            let sj = ((2 * j + 1) * sw) / (2 * tw);
            for (dst, src) in masks.iter_mut().zip(&pm.masks) {
                dst[i * tw + j] = src[si * sw + sj];
            }
        }
    }
    let present = masks.iter().map(|m| m.iter().any(|&b| b)).collect();
    Ok(PartMaskSet {
        grid_h: th,
        grid_w: tw,
        masks,
        present,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMetadata {
    pub dataset_name: String,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorInfo>,
}

/// Frozen result of the three-tier clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct SubConceptDictionary {
    pub dim: usize,
    pub parts: usize,
    pub splits: usize,
    /// `2 × dim`: row 0 background, row 1 foreground.
    pub fgbg_centroids: Vec<f32>,
    /// `parts × dim`
    pub part_centroids: Vec<f32>,
    /// `(parts + 1) × splits × dim`, channel 0 background.
    pub split_centroids: Vec<f32>,
    pub metadata: DictionaryMetadata,
}

impl SubConceptDictionary {
    pub fn channels(&self) -> usize {
        self.parts + 1
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 || self.parts == 0 || self.splits == 0 {
            return Err(validation("dictionary dimensions must be positive"));
        }
        if self.fgbg_centroids.len() != 2 * d
            || self.part_centroids.len() != self.parts * d
            || self.split_centroids.len() != self.channels() * self.splits * d
        {
            return Err(validation("dictionary centroid tables have wrong sizes"));
        }
        let all = self
            .fgbg_centroids
            .iter()
            .chain(&self.part_centroids)
            .chain(&self.split_centroids);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(validation("dictionary holds non-finite centroids"));
        }
        Ok(())
    }

    /// Centroid of split `k` (1-based) in channel `m`.
    pub fn split_centroid(&self, m: usize, k: usize) -> &[f32] {
        let row = m * self.splits + (k - 1);
        &self.split_centroids[row * self.dim..(row + 1) * self.dim]
    }

    pub fn part_centroid(&self, part: usize) -> &[f32] {
        &self.part_centroids[part * self.dim..(part + 1) * self.dim]
    }

    /// Tag every patch: (channel, 1-based split).
    pub fn assign_patches(&self, fm: &FeatureMap) -> Result<Vec<(usize, usize)>> {
        if fm.dim != self.dim {
            return Err(validation(format!(
                "feature dim {} does not match dictionary dim {}",
                fm.dim, self.dim
            )));
        }
        let d = self.dim;
        Ok((0..fm.patches())
            .map(|p| {
                let x = fm.patch(p);
                let (top, _) = nearest(x, &self.fgbg_centroids, d);
                let m = if top == 0 {
                    BACKGROUND_CHANNEL
                } else {
                    nearest(x, &self.part_centroids, d).0 + 1
                };
                let block = &self.split_centroids[m * self.splits * d..(m + 1) * self.splits * d];
                (m, nearest(x, block, d).0 + 1)
            })
            .collect())
    }

    fn blocks(&self) -> [(&'static str, Block); 3] {
        let d = self.dim;
        [
            ("fgbg.psfm", Block::new(2, 1, d, self.fgbg_centroids.clone()).unwrap()),
            ("parts.psfm", Block::new(self.parts, 1, d, self.part_centroids.clone()).unwrap()),
            (
                "splits.psfm",
                Block::new(self.channels(), self.splits, d, self.split_centroids.clone()).unwrap(),
            ),
        ]
    }

    /// Write `dictionary.json` plus the three centroid sidecars.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut hasher = Sha256::new();
        let mut files = BTreeMap::new();
        for (name, block) in self.blocks() {
            let bytes = psfm::encode(&block);
            hasher.update(&bytes);
            let path = dir.join(name);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            files.insert(name.trim_end_matches(".psfm").to_string(), name.to_string());
        }
        let manifest = DictionaryManifest {
            format_version: 1,
            dim: self.dim,
            parts: self.parts,
            splits: self.splits,
            background_channel_index: BACKGROUND_CHANNEL,
            metadata: self.metadata.clone(),
            files,
            checksum: hex::encode(hasher.finalize()),
        };
        let path = dir.join(DICTIONARY_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DICTIONARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DictionaryManifest = serde_json::from_str(&text)?;
        if manifest.format_version != 1 {
            return Err(Error::Format(format!(
                "unsupported dictionary version {}",
                manifest.format_version
            )));
        }
        let mut hasher = Sha256::new();
        let mut read = |key: &str| -> Result<Block> {
            let name = manifest
                .files
                .get(key)
                .ok_or_else(|| Error::Format(format!("dictionary manifest lacks {key}")))?;
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            hasher.update(&bytes);
            psfm::decode(&bytes)
        };
        let fgbg = read("fgbg")?;
        let parts = read("parts")?;
        let splits = read("splits")?;
        if hex::encode(hasher.finalize()) != manifest.checksum {
            return Err(Error::Corruption("dictionary checksum mismatch".into()));
        }
        let dict = Self {
            dim: manifest.dim,
            parts: manifest.parts,
            splits: manifest.splits,
            fgbg_centroids: fgbg.data,
            part_centroids: parts.data,
            split_centroids: splits.data,
            metadata: manifest.metadata,
        };
        dict.validate().map_err(|e| Error::Corruption(e.to_string()))?;
        Ok(dict)
    }

    /// Checksum recorded in `dictionary.json`.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, block) in self.blocks() {
            hasher.update(psfm::encode(&block));
        }
        hex::encode(hasher.finalize())
    }
}

pub const DICTIONARY_FILE: &str = "dictionary.json";

#[derive(Debug, Serialize, Deserialize)]
struct DictionaryManifest {
    format_version: u32,
    dim: usize,
    parts: usize,
    splits: usize,
    background_channel_index: usize,
    metadata: DictionaryMetadata,
    files: BTreeMap<String, String>,
    checksum: String,
}

/// Two-way labels of one image's patches.
#[derive(Debug, Clone)]
pub struct TopLabels<'a> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: &'a [usize],
}

/// Pick which of the two top-tier clusters is background: the one owning the
/// larger average share of image-border patches, ties going to the larger
/// cluster (then to cluster 0).
pub fn identify_background(images: &[TopLabels<'_>]) -> usize {
    let mut occupancy = [0.0f64; 2];
    let mut size = [0usize; 2];
    for img in images {
        let mut border = [0usize; 2];
        let mut total = 0usize;
        for i in 0..img.grid_h {
            for j in 0..img.grid_w {
                let c = img.labels[i * img.grid_w + j];
                size[c] += 1;
                if i == 0 || j == 0 || i + 1 == img.grid_h || j + 1 == img.grid_w {
                    border[c] += 1;
                    total += 1;
                }
            }
        }
        if total > 0 {
            for c in 0..2 {
                occupancy[c] += border[c] as f64 / total as f64;
            }
        }
    }
    if !images.is_empty() {
        for o in &mut occupancy {
            *o /= images.len() as f64;
        }
    }
    if occupancy[0] > occupancy[1] {
        0
    } else if occupancy[1] > occupancy[0] {
        1
    } else if size[1] > size[0] {
        1
    } else {
        0
    }
}

fn derive_seed(seed: u64, tier: u64, channel: u64) -> u64 {
    // splitmix64 over the combined key.
    let mut z = seed
        .wrapping_add(tier.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(channel.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn degenerate(tier: &'static str, channel: Option<usize>, e: KMeansError) -> Error {
    Error::DegenerateClustering {
        tier,
        channel,
        reason: e.to_string(),
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Fit the three-tier hierarchy on patches pooled across every map.
pub fn fit_hierarchy(
    maps: &[FeatureMap],
    dataset_name: &str,
    parts: usize,
    splits: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<SubConceptDictionary> {
    if maps.is_empty() {
        return Err(validation("feature corpus is empty"));
    }
    if parts == 0 || splits == 0 {
        return Err(validation("M and K must be at least 1"));
    }
    let dim = maps[0].dim;
    if let Some(bad) = maps.iter().find(|m| m.dim != dim) {
        return Err(validation(format!("map {:?} has dim {}, expected {dim}", bad.image_id, bad.dim)));
    }
    let pooled: Vec<f64> = maps.iter().flat_map(|m| m.data.iter().map(|&v| v as f64)).collect();

    let top = kmeans(&pooled, dim, 2, derive_seed(seed, 0, 0), opts)
        .map_err(|e| degenerate("top", None, e))?;
    let mut offset = 0;
    let per_image: Vec<TopLabels<'_>> = maps
        .iter()
        .map(|m| {
            let labels = &top.assignments[offset..offset + m.patches()];
            offset += m.patches();
            TopLabels {
                grid_h: m.grid_h,
                grid_w: m.grid_w,
                labels,
            }
        })
        .collect();
    let bg = identify_background(&per_image);
    let fg = 1 - bg;

    let mut channel_points: Vec<Vec<f64>> = vec![Vec::new(); parts + 1];
    let mut fg_points = Vec::new();
    for (p, x) in pooled.chunks_exact(dim).enumerate() {
        if top.assignments[p] == bg {
            channel_points[BACKGROUND_CHANNEL].extend_from_slice(x);
        } else {
            fg_points.extend_from_slice(x);
        }
    }
    let fg_count = fg_points.len() / dim;
    if fg_count < parts * splits {
        return Err(Error::Capacity(format!(
            "{fg_count} foreground patches cannot support M·K = {}",
            parts * splits
        )));
    }

    let part_fit = kmeans(&fg_points, dim, parts, derive_seed(seed, 1, 0), opts)
        .map_err(|e| degenerate("part", None, e))?;
    for (x, &a) in fg_points.chunks_exact(dim).zip(&part_fit.assignments) {
        channel_points[a + 1].extend_from_slice(x);
    }

    let mut split_centroids = Vec::with_capacity((parts + 1) * splits * dim);
    for (m, pts) in channel_points.iter().enumerate() {
        let fit = kmeans(pts, dim, splits, derive_seed(seed, 2, m as u64), opts)
            .map_err(|e| degenerate("split", Some(m), e))?;
        split_centroids.extend(to_f32(&fit.centroids));
    }

    let mut fgbg = to_f32(top.centroid(bg));
    fgbg.extend(to_f32(top.centroid(fg)));
    let dict = SubConceptDictionary {
        dim,
        parts,
        splits,
        fgbg_centroids: fgbg,
        part_centroids: to_f32(&part_fit.centroids),
        split_centroids,
        metadata: DictionaryMetadata {
            dataset_name: dataset_name.to_string(),
            seed,
            kmeans: *opts,
            extractor: None,
        },
    };
    dict.validate()?;
    Ok(dict)
}

/// Tag an image: per-channel majority split (ties toward the lower split)
/// and the channel masks on the feature grid.
pub fn tag_image(fm: &FeatureMap, dict: &SubConceptDictionary) -> Result<(PromptCode, PartMaskSet)> {
    let assigned = dict.assign_patches(fm)?;
    let channels = dict.channels();
    let mut votes = vec![vec![0usize; dict.splits]; channels];
    for &(m, k) in &assigned {
        votes[m][k - 1] += 1;
    }
    let splits = votes
        .iter()
        .map(|v| {
            let best = v.iter().copied().max().unwrap_or(0);
            (best > 0).then(|| v.iter().position(|&c| c == best).unwrap() + 1)
        })
        .collect();
    let labels: Vec<usize> = assigned.iter().map(|&(m, _)| m).collect();
    let masks = PartMaskSet::from_labels(fm.grid_h, fm.grid_w, channels, &labels);
    Ok((PromptCode::new(splits)?, masks))
}

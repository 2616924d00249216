//! Patch-feature maps, their on-disk format, and the extractor boundary.
//!
//! No vision backbone is linked into this crate. Features come either from
//! precomputed PSFM files or from an [`ExtractorAdapter`]; the bundled
//! [`StubExtractor`] is a deterministic random-feature map of per-patch mean
//! color, good enough to drive clustering at desk scale.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::psfm::{self, Block};

/// Grid of patch feature vectors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Row-major `grid_h × grid_w × dim`.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let fm = Self {
            image_id: image_id.into(),
            grid_h,
            grid_w,
            dim,
            data,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 2 || self.grid_w < 2 {
            return Err(validation(format!(
                "feature grid {}x{} is degenerate (needs at least 2x2)",
                self.grid_h, self.grid_w
            )));
        }
        if self.dim == 0 {
            return Err(validation("feature dim must be positive"));
        }
        if self.data.len() != self.grid_h * self.grid_w * self.dim {
            return Err(Error::Corruption(format!(
                "feature data length {} does not match {}x{}x{}",
                self.data.len(),
                self.grid_h,
                self.grid_w,
                self.dim
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(validation(format!("non-finite feature value at index {i}")));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        psfm::encode(&Block {
            grid_h: self.grid_h as u32,
            grid_w: self.grid_w as u32,
            dim: self.dim as u32,
            data: self.data.clone(),
        })
    }

    pub fn from_bytes(image_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let block = psfm::decode(bytes)?;
        Self::new(
            image_id,
            block.grid_h as usize,
            block.grid_w as usize,
            block.dim as usize,
            block.data,
        )
    }
}

/// Read a feature file; the image id is the file stem.
pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureMap::from_bytes(id, &bytes)
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    fm.validate()?;
    fs::write(path, fm.to_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Source image the features were extracted from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorpus {
    pub dataset_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorInfo>,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl FeatureCorpus {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(validation(format!("duplicate image_id {:?}", r.image_id)));
            }
        }
        if let Some(first) = self.records.first() {
            if let Some(r) = self.records.iter().find(|r| r.dim != first.dim) {
                return Err(validation(format!(
                    "record {:?} has dim {} but corpus dim is {}",
                    r.image_id, r.dim, first.dim
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.dim)
    }

    /// Load `manifest.json` from a features directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut corpus: FeatureCorpus = serde_json::from_str(&text)?;
        corpus.root = dir.to_path_buf();
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Read every map, checking it against its manifest record.
    pub fn load_maps(&self) -> Result<Vec<FeatureMap>> {
        self.records
            .iter()
            .map(|r| {
                let mut fm = read_feature_map(&self.resolve(&r.path))?;
                if (fm.grid_h, fm.grid_w, fm.dim) != (r.grid_h, r.grid_w, r.dim) {
                    return Err(Error::Corruption(format!(
                        "{}: file is {}x{}x{}, manifest says {}x{}x{}",
                        r.path, fm.grid_h, fm.grid_w, fm.dim, r.grid_h, r.grid_w, r.dim
                    )));
                }
                fm.image_id = r.image_id.clone();
                Ok(fm)
            })
            .collect()
    }
}

/// Decoded 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(validation(format!(
                "rgb buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn solid(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.data)
    }

    /// Decode a PNG, dropping alpha and expanding grayscale and palettes.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let bad = |e: png::DecodingError| Error::Format(format!("png: {e}"));
        let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(bad)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png: image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let stride = info.color_type.samples();
        let data = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks(stride).flat_map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
                px.chunks(stride).flat_map(|c| [c[0]; 3]).collect()
            }
            png::ColorType::Indexed => return Err(Error::Format("png: unexpanded palette".into())),
        };
        Self::new(w, h, data)
    }

    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

/// 8-bit grayscale PNG.
pub fn gray_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    encode_png(width, height, png::ColorType::Grayscale, pixels)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height * color.samples() {
        return Err(validation("pixel buffer does not match the image size"));
    }
    let bad = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(data).map_err(bad)?;
    writer.finish().map_err(bad)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorInfo {
    pub kind: String,
    pub patch_size: usize,
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bandwidth: f64,
}

/// Boundary to whatever produces patch features for an image.
pub trait ExtractorAdapter: Send + Sync {
    fn info(&self) -> ExtractorInfo;

    /// Patch grid for an image of the given size.
    fn grid_for(&self, width: usize, height: usize) -> (usize, usize) {
        let p = self.info().patch_size;
        (height / p, width / p)
    }

    fn extract(&self, image_id: &str, image: &RgbImage) -> Result<FeatureMap>;
}

/// Extraction through an adapter; surfaces a dependency error when the
/// adapter is missing so callers can fall back to precomputed files.
pub fn extract_features(
    image_id: &str,
    image: &RgbImage,
    adapter: Option<&dyn ExtractorAdapter>,
) -> Result<FeatureMap> {
    let adapter =
        adapter.ok_or_else(|| Error::Dependency("no feature extractor configured".into()))?;
    adapter.extract(image_id, image)
}

/// Random Fourier features of the per-patch mean color.
///
/// Feature `j` is `sqrt(2/D)·cos(w_j·c + b_j)` with `c` the mean color in
/// `[0,1]^3` and `(w_j, b_j)` drawn from a PRNG seeded with `seed`. Equal
/// colors give equal vectors; nearby colors give nearby vectors.
#[derive(Debug, Clone)]
pub struct StubExtractor {
    patch_size: usize,
    dim: usize,
    seed: u64,
    bandwidth: f64,
    weights: Vec<[f64; 3]>,
    phases: Vec<f64>,
}

impl StubExtractor {
    pub const KIND: &'static str = "stub-rff";

    pub fn new(patch_size: usize, dim: usize, seed: u64, bandwidth: f64) -> Result<Self> {
        if patch_size == 0 || dim == 0 {
            return Err(validation("stub extractor needs positive patch size and dim"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim)
            .map(|_| {
                let mut w = [0.0; 3];
                for v in &mut w {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * bandwidth;
                }
                w
            })
            .collect();
        let phases = (0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Ok(Self {
            patch_size,
            dim,
            seed,
            bandwidth,
            weights,
            phases,
        })
    }

    pub fn from_info(info: &ExtractorInfo) -> Result<Self> {
        if info.kind != Self::KIND {
            return Err(Error::Dependency(format!(
                "extractor {:?} is not bundled; supply precomputed features",
                info.kind
            )));
        }
        Self::new(info.patch_size, info.dim, info.seed, info.bandwidth)
    }

    /// Feature vector of a color given in `[0,1]^3`.
    pub fn color_features(&self, color: [f64; 3]) -> Vec<f32> {
        let scale = (2.0 / self.dim as f64).sqrt();
        self.weights
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| {
                let arg = w[0] * color[0] + w[1] * color[1] + w[2] * color[2] + b;
                (scale * arg.cos()) as f32
            })
            .collect()
    }
}

impl ExtractorAdapter for StubExtractor {
    fn info(&self) -> ExtractorInfo {
        ExtractorInfo {
            kind: Self::KIND.into(),
            patch_size: self.patch_size,
            dim: self.dim,
            seed: self.seed,
            bandwidth: self.bandwidth,
        }
    }

    fn extract(&self, image_id: &str, image: &RgbImage) -> Result<FeatureMap> {
        let (gh, gw) = self.grid_for(image.width, image.height);
        let p = self.patch_size;
        let mut data = Vec::with_capacity(gh * gw * self.dim);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut sum = [0u64; 3];
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        let px = image.pixel(x, y);
                        for c in 0..3 {
                            sum[c] += px[c] as u64;
                        }
                    }
                }
                let n = (p * p) as f64 * 255.0;
                let color = sum.map(|s| s as f64 / n);
                data.extend(self.color_features(color));
            }
        }
        FeatureMap::new(image_id, gh, gw, self.dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn png_round_trips() {
        let mut img = RgbImage::solid(5, 3, [10, 20, 30]);
        img.set_pixel(4, 2, [255, 0, 7]);
        assert_eq!(RgbImage::from_png(&img.to_png().unwrap()).unwrap(), img);
        let gray = gray_png(2, 1, &[0, 200]).unwrap();
        assert_eq!(RgbImage::from_png(&gray).unwrap().data, vec![0, 0, 0, 200, 200, 200]);
    }

    #[test]
    fn zero_map_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMap::new("img", 4, 4, 8, vec![0.0; 128]).unwrap();
        let path = dir.path().join("img.psfm");
        write_feature_map(&path, &fm).unwrap();
        assert_eq!(read_feature_map(&path).unwrap(), fm);
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let fm = FeatureMap::new("a", 2, 2, 3, vec![1.0; 12]).unwrap();
        let bytes = fm.to_bytes();
        assert!(matches!(
            FeatureMap::from_bytes("a", &bytes[..bytes.len() - 4]),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert!(FeatureMap::new("a", 1, 1, 2, vec![0.0; 2]).is_err());
        let mut data = vec![0.0; 8];
        data[3] = f32::NAN;
        assert!(matches!(FeatureMap::new("a", 2, 2, 2, data), Err(Error::Validation(_))));
    }

    #[test]
    fn many_random_maps_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..1000 {
            let (h, w, d) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..9));
            let data: Vec<f32> = (0..h * w * d)
                .map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff))
                .collect();
            let fm = FeatureMap::new(format!("m{i}"), h, w, d, data).unwrap();
            let bytes = fm.to_bytes();
            let back = FeatureMap::from_bytes(fm.image_id.clone(), &bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    proptest! {
        #[test]
        fn serialization_is_identity(h in 2usize..5, w in 2usize..5, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..h * w * d).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let fm = FeatureMap::new("p", h, w, d, data).unwrap();
            let back = FeatureMap::from_bytes("p", &fm.to_bytes()).unwrap();
            prop_assert_eq!(
                back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                fm.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corpus_rejects_duplicates_and_mixed_dims() {
        let rec = |id: &str, dim| ManifestRecord {
            image_id: id.into(),
            path: format!("{id}.psfm"),
            grid_h: 2,
            grid_w: 2,
            dim,
            source: None,
        };
        let mut corpus = FeatureCorpus {
            dataset_name: "t".into(),
            extractor: None,
            records: vec![rec("a", 4), rec("a", 4)],
            root: PathBuf::new(),
        };
        assert!(corpus.validate().is_err());
        corpus.records = vec![rec("a", 4), rec("b", 5)];
        assert!(corpus.validate().is_err());
        corpus.records = vec![rec("a", 4), rec("b", 4)];
        assert!(corpus.validate().is_ok());
    }

    #[test]
    fn stub_on_solid_image_is_constant() {
        let ex = StubExtractor::new(4, 16, 1, 3.0).unwrap();
        let fm = ex.extract("s", &RgbImage::solid(16, 12, [10, 200, 30])).unwrap();
        assert_eq!((fm.grid_h, fm.grid_w), (3, 4));
        assert!((1..fm.patches()).all(|i| fm.patch(i) == fm.patch(0)));
    }

    #[test]
    fn stub_on_half_black_half_white_gives_two_vectors() {
        let ex = StubExtractor::new(2, 8, 7, 3.0).unwrap();
        let mut img = RgbImage::solid(8, 8, [0, 0, 0]);
        for y in 0..8 {
            for x in 4..8 {
                img.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let fm = ex.extract("bw", &img).unwrap();
        let black = ex.color_features([0.0, 0.0, 0.0]);
        let white = ex.color_features([1.0, 1.0, 1.0]);
        assert_ne!(black, white);
        for gy in 0..4 {
            for gx in 0..4 {
                let expect = if gx < 2 { &black } else { &white };
                assert_eq!(fm.patch(gy * 4 + gx), expect.as_slice());
            }
        }
    }

    #[test]
    fn patch_geometry() {
        let ex = StubExtractor::new(16, 4, 0, 1.0).unwrap();
        assert_eq!(ex.grid_for(512, 512), (32, 32));
    }

    #[test]
    fn stub_is_pure() {
        let ex = StubExtractor::new(2, 8, 3, 2.0).unwrap();
        let mut img = RgbImage::solid(6, 6, [1, 2, 3]);
        img.set_pixel(4, 1, [250, 0, 90]);
        assert_eq!(ex.extract("x", &img).unwrap(), StubExtractor::new(2, 8, 3, 2.0).unwrap().extract("x", &img).unwrap());
    }

    #[test]
    fn missing_adapter_is_dependency_error() {
        let img = RgbImage::solid(4, 4, [0, 0, 0]);
        assert!(matches!(extract_features("x", &img, None), Err(Error::Dependency(_))));
    }
}

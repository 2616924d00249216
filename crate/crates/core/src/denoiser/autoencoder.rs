//! Fixed patchwise linear map between RGB images and latent grids.
//!
//! Each `patch × patch` block is averaged, scaled to `[-1, 1]` and sent
//! through a 4×3 matrix with orthonormal columns, so decoding is the
//! transpose followed by a broadcast back over the block.

use crate::error::{validation, Result};
use crate::feature_io::RgbImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;

/// First three columns of the normalized 4×4 Hadamard matrix.
const MIX: [[f64; 3]; LATENT_CHANNELS] = [
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchAutoencoder {
    pub patch: usize,
}

impl PatchAutoencoder {
    pub fn new(patch: usize) -> Self {
        assert!(patch > 0, "patch size must be positive");
        Self { patch }
    }

    pub fn grid_for(&self, width: usize, height: usize) -> (usize, usize) {
        (height / self.patch, width / self.patch)
    }

    /// `cells × 4` latent, cells in row-major grid order.
    pub fn encode<T: Scalar>(&self, img: &RgbImage) -> Result<Tensor<T>> {
        let (gh, gw) = self.grid_for(img.width, img.height);
        if gh == 0 || gw == 0 || img.width % self.patch != 0 || img.height % self.patch != 0 {
            return Err(validation(format!(
                "{}x{} image does not tile into {} px patches",
                img.width, img.height, self.patch
            )));
        }
        let mut z = Tensor::zeros(gh * gw, LATENT_CHANNELS);
        let area = (self.patch * self.patch) as f64;
        for gy in 0..gh {
            for gx in 0..gw {
                let mut mean = [0.0f64; 3];
                for y in gy * self.patch..(gy + 1) * self.patch {
                    for x in gx * self.patch..(gx + 1) * self.patch {
                        let p = img.pixel(x, y);
                        for c in 0..3 {
                            mean[c] += p[c] as f64;
                        }
                    }
                }
                let rgb = mean.map(|s| s / area / 127.5 - 1.0);
                for (ch, row) in MIX.iter().enumerate() {
                    let v: f64 = row.iter().zip(&rgb).map(|(a, b)| a * b).sum();
                    z[(gy * gw + gx, ch)] = T::of(v);
                }
            }
        }
        Ok(z)
    }

    pub fn decode<T: Scalar>(&self, z: &Tensor<T>, grid: (usize, usize)) -> Result<RgbImage> {
        let (gh, gw) = grid;
        if z.shape() != (gh * gw, LATENT_CHANNELS) {
            return Err(validation(format!(
                "latent is {:?}, expected {:?}",
                z.shape(),
                (gh * gw, LATENT_CHANNELS)
            )));
        }
        let mut img = RgbImage::solid(gw * self.patch, gh * self.patch, [0, 0, 0]);
        for gy in 0..gh {
            for gx in 0..gw {
                let cell = z.row(gy * gw + gx);
                let mut rgb = [0u8; 3];
                for (c, out) in rgb.iter_mut().enumerate() {
                    let v: f64 = (0..LATENT_CHANNELS).map(|ch| MIX[ch][c] * cell[ch].as_f64()).sum();
                    *out = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                }
                for y in gy * self.patch..(gy + 1) * self.patch {
                    for x in gx * self.patch..(gx + 1) * self.patch {
                        img.set_pixel(x, y, rgb);
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Mirror a row-major `cells × C` latent left-to-right.
pub fn flip_latent<T: Scalar>(z: &Tensor<T>, grid: (usize, usize)) -> Tensor<T> {
    let (gh, gw) = grid;
    let mut out = z.clone();
    for y in 0..gh {
        for x in 0..gw {
            out.row_mut(y * gw + gw - 1 - x).copy_from_slice(z.row(y * gw + x));
        }
    }
    out
}

//! Reconstruction and attention objectives.
//!
//! Each loss comes with its analytic gradient so the autodiff tape can wrap
//! it as a single node; the gradients are checked against central finite
//! differences in the tests below.

use serde::{Deserialize, Serialize};

use crate::discovery::PartMaskSet;
use crate::error::{validation, Result};
use crate::scalar::Scalar;

/// Default weight of the attention term in the total objective.
pub const DEFAULT_LAMBDA_ATTN: f64 = 0.01;
/// Clamp applied to normalized attention before taking logs.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Raw cross-attention maps gathered at pseudo-token positions.
///
/// Layout is `layer × channel × cell` with cells row-major over `h × w`.
/// Entries of absent channels are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T> {
    pub layers: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
    pub present: Vec<bool>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn new(
        layers: usize,
        channels: usize,
        h: usize,
        w: usize,
        data: Vec<T>,
        present: Vec<bool>,
    ) -> Result<Self> {
        let stack = Self {
            layers,
            channels,
            h,
            w,
            data,
            present,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels == 0 || self.h == 0 || self.w == 0 {
            return Err(validation("attention stack has an empty dimension"));
        }
        if self.data.len() != self.layers * self.channels * self.h * self.w {
            return Err(validation("attention stack data length mismatch"));
        }
        if self.present.len() != self.channels {
            return Err(validation("attention stack presence length mismatch"));
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(validation("attention entries must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn map(&self, layer: usize, channel: usize) -> &[T] {
        let n = self.cells();
        let start = (layer * self.channels + channel) * n;
        &self.data[start..start + n]
    }

    /// Mirror every map left-to-right.
    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        let (h, w) = (self.h, self.w);
        for block in out.data.chunks_mut(h * w) {
            for row in block.chunks_mut(w) {
                row.reverse();
            }
        }
        out
    }
}

/// Layer-averaged attention normalized across present channels at each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAttention<T> {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    /// `channel × cell`
    pub data: Vec<T>,
    pub present: Vec<bool>,
}

impl<T: Scalar> NormalizedAttention<T> {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, m: usize) -> &[T] {
        let n = self.cells();
        &self.data[m * n..(m + 1) * n]
    }

    /// Per-cell index of the present channel with the largest weight
    /// (ties toward the lower channel).
    pub fn argmax_channels(&self) -> Vec<usize> {
        let n = self.cells();
        (0..n)
            .map(|p| {
                let mut best = None::<(usize, T)>;
                for m in (0..self.channels).filter(|&m| self.present[m]) {
                    let v = self.data[m * n + p];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((m, v));
                    }
                }
                best.map_or(0, |(m, _)| m)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttnLossKind {
    /// Binary cross-entropy between normalized attention and masks.
    #[default]
    Bce,
    /// Mean-square ablation.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ldm: f64,
    pub l_attn: f64,
    pub l_total: f64,
    pub lambda_attn: f64,
}

impl LossReport {
    pub fn new(l_ldm: f64, l_attn: f64, lambda_attn: f64) -> Self {
        Self {
            l_ldm,
            l_attn,
            l_total: total_loss(l_ldm, l_attn, lambda_attn),
            lambda_attn,
        }
    }
}

fn present_count(present: &[bool]) -> usize {
    present.iter().filter(|&&p| p).count()
}

pub fn normalize_attention<T: Scalar>(stack: &AttentionStack<T>) -> Result<NormalizedAttention<T>> {
    stack.validate()?;
    let n_present = present_count(&stack.present);
    if n_present == 0 {
        return Err(validation("normalize_attention: all channels absent"));
    }
    let n = stack.cells();
    let inv_l = T::one() / T::from_usize(stack.layers).unwrap();
    let mut mean = vec![T::zero(); stack.channels * n];
    for m in (0..stack.channels).filter(|&m| stack.present[m]) {
        let dst = &mut mean[m * n..(m + 1) * n];
        for l in 0..stack.layers {
            for (d, &a) in dst.iter_mut().zip(stack.map(l, m)) {
                *d += a;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv_l;
        }
    }
    let uniform = T::one() / T::from_usize(n_present).unwrap();
    let mut data = vec![T::zero(); stack.channels * n];
    for p in 0..n {
        let denom: T = (0..stack.channels)
            .filter(|&m| stack.present[m])
            .map(|m| mean[m * n + p])
            .sum();
        for m in (0..stack.channels).filter(|&m| stack.present[m]) {
            data[m * n + p] = if denom > T::zero() {
                mean[m * n + p] / denom
            } else {
                uniform
            };
        }
    }
    Ok(NormalizedAttention {
        channels: stack.channels,
        h: stack.h,
        w: stack.w,
        data,
        present: stack.present.clone(),
    })
}

/// Pull a gradient on the normalized maps back onto the raw stack.
pub fn normalize_attention_backward<T: Scalar>(
    stack: &AttentionStack<T>,
    norm: &NormalizedAttention<T>,
    grad_norm: &[T],
) -> Vec<T> {
    let n = stack.cells();
    let c = stack.channels;
    let inv_l = T::one() / T::from_usize(stack.layers).unwrap();
    let mut grad_mean = vec![T::zero(); c * n];
    for p in 0..n {
        let denom: T = (0..c)
            .filter(|&m| stack.present[m])
            .map(|m| (0..stack.layers).map(|l| stack.map(l, m)[p]).sum::<T>() * inv_l)
            .sum();
        if denom <= T::zero() {
            continue;
        }
        let inner: T = (0..c)
            .filter(|&m| stack.present[m])
            .map(|m| grad_norm[m * n + p] * norm.data[m * n + p])
            .sum();
        for j in (0..c).filter(|&m| stack.present[m]) {
            grad_mean[j * n + p] = (grad_norm[j * n + p] - inner) / denom;
        }
    }
    let mut grad = vec![T::zero(); stack.data.len()];
    for l in 0..stack.layers {
        for m in 0..c {
            let start = (l * c + m) * n;
            for p in 0..n {
                grad[start + p] = grad_mean[m * n + p] * inv_l;
            }
        }
    }
    grad
}

fn check_masks<T: Scalar>(norm: &NormalizedAttention<T>, masks: &PartMaskSet) -> Result<()> {
    if masks.grid_h != norm.h || masks.grid_w != norm.w {
        return Err(validation(format!(
            "mask grid {}x{} does not match attention grid {}x{}",
            masks.grid_h, masks.grid_w, norm.h, norm.w
        )));
    }
    if masks.channels() != norm.channels {
        return Err(validation("mask channel count does not match attention"));
    }
    if masks.present != norm.present {
        return Err(validation("presence flags disagree between attention and masks"));
    }
    if present_count(&norm.present) == 0 {
        return Err(validation("attention_loss: no present channel"));
    }
    Ok(())
}

/// Mean binary cross-entropy over present channels and all cells.
pub fn attention_loss<T: Scalar>(
    norm: &NormalizedAttention<T>,
    masks: &PartMaskSet,
    eps: T,
) -> Result<T> {
    attention_loss_with_grad(norm, masks, eps, AttnLossKind::Bce, false).map(|(l, _)| l)
}

/// Loss value and, optionally, its gradient w.r.t. the normalized maps.
pub fn attention_loss_with_grad<T: Scalar>(
    norm: &NormalizedAttention<T>,
    masks: &PartMaskSet,
    eps: T,
    kind: AttnLossKind,
    want_grad: bool,
) -> Result<(T, Vec<T>)> {
    check_masks(norm, masks)?;
    let n = norm.cells();
    let count = T::from_usize(present_count(&norm.present) * n).unwrap();
    let one = T::one();
    let mut total = T::zero();
    let mut grad = if want_grad {
        vec![T::zero(); norm.data.len()]
    } else {
        Vec::new()
    };
    for m in (0..norm.channels).filter(|&m| norm.present[m]) {
        let mask = &masks.masks[m];
        for p in 0..n {
            let a = norm.data[m * n + p];
            let s = if mask[p] { one } else { T::zero() };
            let (value, d) = match kind {
                AttnLossKind::Bce => {
                    let clamped = a.max(eps).min(one - eps);
                    let value = -(s * clamped.ln() + (one - s) * (one - clamped).ln());
                    let d = if a < eps || a > one - eps {
                        T::zero()
                    } else {
                        -s / clamped + (one - s) / (one - clamped)
                    };
                    (value, d)
                }
                AttnLossKind::Mse => {
                    let diff = a - s;
                    (diff * diff, (diff + diff))
                }
            };
            total += value;
            if want_grad {
                grad[m * n + p] = d / count;
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean squared error between the sampled noise and the prediction.
pub fn diffusion_loss<T: Scalar>(noise: &[T], predicted: &[T]) -> Result<T> {
    if noise.len() != predicted.len() {
        return Err(validation(format!(
            "diffusion_loss shape mismatch: {} vs {}",
            noise.len(),
            predicted.len()
        )));
    }
    if noise.is_empty() {
        return Err(validation("diffusion_loss on empty tensors"));
    }
    let n = T::from_usize(noise.len()).unwrap();
    Ok(noise
        .iter()
        .zip(predicted)
        .map(|(&e, &p)| (e - p) * (e - p))
        .sum::<T>()
        / n)
}

/// Gradient of [`diffusion_loss`] w.r.t. the prediction.
pub fn diffusion_loss_grad<T: Scalar>(noise: &[T], predicted: &[T]) -> Vec<T> {
    let scale = T::of(2.0) / T::from_usize(noise.len()).unwrap();
    noise
        .iter()
        .zip(predicted)
        .map(|(&e, &p)| (p - e) * scale)
        .collect()
}

pub fn total_loss(l_ldm: f64, l_attn: f64, lambda_attn: f64) -> f64 {
    l_ldm + lambda_attn * l_attn
}

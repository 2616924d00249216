//! Linear-beta DDPM noise schedule and the strided ancestral sampler step.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least two steps");
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alphas_cumprod }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `z_t = sqrt(ᾱ_t)·z_0 + sqrt(1 − ᾱ_t)·ε`
    pub fn add_noise<T: Scalar>(&self, z0: &Tensor<T>, noise: &Tensor<T>, t: usize) -> Tensor<T> {
        let a = T::of(self.alpha_bar(t).sqrt());
        let s = T::of((1.0 - self.alpha_bar(t)).sqrt());
        z0.zip_map(noise, |x, e| a * x + s * e)
    }

    /// Clean-latent estimate implied by a noise prediction.
    pub fn predict_x0<T: Scalar>(&self, z_t: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Tensor<T> {
        let ab = self.alpha_bar(t);
        let a = T::of(1.0 / ab.sqrt());
        let s = T::of((1.0 - ab).sqrt() / ab.sqrt());
        z_t.zip_map(eps, |z, e| a * z - s * e)
    }

    /// Evenly strided timesteps, descending, always starting at the last step.
    pub fn sampling_timesteps(&self, n: usize) -> Vec<usize> {
        let n = n.clamp(1, self.steps());
        let stride = self.steps() as f64 / n as f64;
        let mut ts: Vec<usize> = (0..n).map(|i| (i as f64 * stride).round() as usize).collect();
        ts.dedup();
        ts.reverse();
        ts[0] = self.steps() - 1;
        ts
    }

    /// One ancestral step from `t` to `t_prev` (`None` = the clean end).
    ///
    /// Returns the posterior mean and standard deviation.
    pub fn posterior<T: Scalar>(
        &self,
        z_t: &Tensor<T>,
        x0: &Tensor<T>,
        t: usize,
        t_prev: Option<usize>,
    ) -> (Tensor<T>, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_prev = t_prev.map_or(1.0, |p| self.alpha_bar(p));
        let beta = 1.0 - ab_t / ab_prev;
        let alpha = 1.0 - beta;
        let c0 = T::of(ab_prev.sqrt() * beta / (1.0 - ab_t));
        let ct = T::of(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t));
        let mean = x0.zip_map(z_t, |x, z| c0 * x + ct * z);
        let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
        (mean, var.max(0.0).sqrt())
    }
}

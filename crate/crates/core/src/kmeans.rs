//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tolerance: f64,
    /// Reseeding attempts after a run ends with an empty cluster.
    pub max_restarts: usize,
    /// Independent seedings; the fit with the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tolerance: 1e-6,
            max_restarts: 3,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit<T> {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<T>,
    pub assignments: Vec<usize>,
    pub inertia: T,
    pub iterations: usize,
}

impl<T: Scalar> KMeansFit<T> {
    pub fn centroid(&self, c: usize) -> &[T] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KMeansError {
    TooFewPoints { points: usize, k: usize },
    EmptyCluster { attempts: usize },
}

impl std::fmt::Display for KMeansError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KMeansError::TooFewPoints { points, k } => {
                write!(f, "{points} points cannot form {k} clusters")
            }
            KMeansError::EmptyCluster { attempts } => {
                write!(f, "a cluster stayed empty after {attempts} attempts")
            }
        }
    }
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest<T: Scalar>(point: &[T], centroids: &[T], dim: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<T: Scalar>(points: &[T], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut dist: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| squared_distance(p, &centroids[..dim]).as_f64())
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let chosen = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let new = &points[chosen * dim..(chosen + 1) * dim];
        centroids.extend_from_slice(new);
        let new = &centroids[c * dim..(c + 1) * dim];
        for (d, p) in dist.iter_mut().zip(points.chunks_exact(dim)) {
            let nd = squared_distance(p, new).as_f64();
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

fn lloyd<T: Scalar>(
    points: &[T],
    dim: usize,
    k: usize,
    mut centroids: Vec<T>,
    opts: &KMeansOptions,
) -> Option<KMeansFit<T>> {
    let n = points.len() / dim;
    let mut assignments = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut inertia = T::zero();
        for (a, p) in assignments.iter_mut().zip(points.chunks_exact(dim)) {
            let (c, d) = nearest(p, &centroids, dim);
            *a = c;
            inertia += d;
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![T::zero(); k * dim];
        for (&a, p) in assignments.iter().zip(points.chunks_exact(dim)) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            let inv = T::one() / T::from_usize(counts[c]).unwrap();
            for j in 0..dim {
                centroids[c * dim + j] = sums[c * dim + j] * inv;
            }
        }
        let inertia_f = inertia.as_f64();
        let converged = prev_inertia.is_finite()
            && (prev_inertia - inertia_f).abs() <= opts.tolerance * prev_inertia.max(f64::MIN_POSITIVE);
        prev_inertia = inertia_f;
        if converged || iterations >= opts.max_iter {
            // Final assignment against the updated centroids.
            let mut inertia = T::zero();
            for (a, p) in assignments.iter_mut().zip(points.chunks_exact(dim)) {
                let (c, d) = nearest(p, &centroids, dim);
                *a = c;
                inertia += d;
            }
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            if counts.contains(&0) {
                return None;
            }
            return Some(KMeansFit {
                k,
                dim,
                centroids,
                assignments,
                inertia,
                iterations,
            });
        }
    }
}

/// Cluster `points` (flat, `n × dim`) into `k` groups.
///
/// Deterministic for a given `seed`. A run that ends with an empty cluster
/// is reseeded up to `opts.max_restarts` times. With `opts.n_init > 1` the
/// whole procedure repeats and the lowest-inertia fit is kept, ties going to
/// the earlier run.
pub fn kmeans<T: Scalar>(
    points: &[T],
    dim: usize,
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<KMeansFit<T>, KMeansError> {
    assert!(dim > 0 && k > 0, "kmeans needs positive dim and k");
    let n = points.len() / dim;
    if n < k {
        return Err(KMeansError::TooFewPoints { points: n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attempts = opts.max_restarts + 1;
    let mut best: Option<KMeansFit<T>> = None;
    for _ in 0..opts.n_init.max(1) {
        let mut fit = None;
        for _ in 0..attempts {
            let init = seed_plus_plus(points, dim, k, &mut rng);
            fit = lloyd(points, dim, k, init, opts);
            if fit.is_some() {
                break;
            }
        }
        let Some(fit) = fit else {
            return Err(KMeansError::EmptyCluster { attempts });
        };
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

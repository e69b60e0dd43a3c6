//! Product-Gaussian kernel density estimation, sampling from the fitted
//! density, and the clipped density ratio `p(x) p(z) / p(x, z)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Monte Carlo settings for the density-based estimators.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KdeConfig {
    /// Cap on the density ratio. Extrapolation into regions the joint
    /// density leaves empty is the dominant failure mode of the fully
    /// nonparametric estimator; clipping bounds the influence-term variance
    /// at the cost of bias.
    pub clip_max: f64,
    /// Number of Monte Carlo draws for the integral terms.
    pub mc_draws: usize,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig { clip_max: 50.0, mc_draws: 1000 }
    }
}

/// Product-Gaussian kernel density over a point cloud with per-dimension
/// bandwidths.
#[derive(Debug, Clone)]
pub struct KdeModel {
    points: DMatrix<f64>,
    bandwidths: DVector<f64>,
}

const LOG_2PI: f64 = 1.8378770664093453;

impl KdeModel {
    /// Explicit construction; bandwidths must be strictly positive.
    pub fn with_bandwidths(points: DMatrix<f64>, bandwidths: DVector<f64>) -> Result<Self> {
        if bandwidths.len() != points.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bandwidths", points.ncols()),
                got: format!("{}", bandwidths.len()),
            });
        }
        if let Some(j) = (0..bandwidths.len()).find(|&j| !(bandwidths[j] > 0.0)) {
            return Err(Error::DegenerateBandwidth { dim: j });
        }
        Ok(KdeModel { points, bandwidths })
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn bandwidths(&self) -> &DVector<f64> {
        &self.bandwidths
    }

    /// Log density at a query point, computed by log-sum-exp so far-out
    /// queries underflow gracefully instead of hitting 0/0 in ratios.
    pub fn log_density(&self, query: &[f64]) -> f64 {
        let d = self.dim();
        assert_eq!(query.len(), d, "query dimension mismatch");
        let n = self.n();
        let log_norm: f64 = -0.5 * d as f64 * LOG_2PI
            - self.bandwidths.iter().map(|h| h.ln()).sum::<f64>();
        let mut exponents = Vec::with_capacity(n);
        let mut max_e = f64::NEG_INFINITY;
        for i in 0..n {
            let mut e = 0.0;
            for j in 0..d {
                let u = (query[j] - self.points[(i, j)]) / self.bandwidths[j];
                e -= 0.5 * u * u;
            }
            max_e = max_e.max(e);
            exponents.push(e);
        }
        let sum: f64 = exponents.iter().map(|e| (e - max_e).exp()).sum();
        log_norm + max_e + sum.ln() - (n as f64).ln()
    }

    /// Density at a query point; strictly positive for finite queries.
    pub fn density(&self, query: &[f64]) -> f64 {
        self.log_density(query).exp().max(f64::MIN_POSITIVE)
    }
}

/// Fit a product-Gaussian KDE with Scott's rule bandwidths:
/// `h_j = sigma_j * n^(-1/(d+4))`.
pub fn fit_kde(points: &DMatrix<f64>) -> Result<KdeModel> {
    let n = points.nrows();
    let d = points.ncols();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
    let mut bandwidths = DVector::zeros(d);
    for j in 0..d {
        let col = points.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateBandwidth { dim: j });
        }
        bandwidths[j] = var.sqrt() * factor;
    }
    KdeModel::with_bandwidths(points.clone(), bandwidths)
}

/// Draw `count` i.i.d. samples: a uniformly chosen data point plus
/// per-dimension Gaussian noise scaled by the bandwidth.
pub fn kde_sample(model: &KdeModel, count: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "kde-sample", 0);
    let d = model.dim();
    let n = model.n();
    let mut out = DMatrix::zeros(count, d);
    for i in 0..count {
        let pick = r.random_range(0..n);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut r);
            out[(i, j)] = model.points[(pick, j)] + model.bandwidths[j] * noise;
        }
    }
    out
}

/// Clipped density ratio `min(p(x) p(z) / p(x,z), clip_max)`, never NaN.
/// The joint query is the concatenation `(x_row, z_row)`.
pub fn density_ratio(
    kde_x: &KdeModel,
    kde_z: &KdeModel,
    kde_xz: &KdeModel,
    x_row: &[f64],
    z_row: &[f64],
    clip_max: f64,
) -> f64 {
    debug_assert_eq!(kde_x.dim() + kde_z.dim(), kde_xz.dim());
    let mut joint = Vec::with_capacity(x_row.len() + z_row.len());
    joint.extend_from_slice(x_row);
    joint.extend_from_slice(z_row);
    let log_ratio =
        kde_x.log_density(x_row) + kde_z.log_density(z_row) - kde_xz.log_density(&joint);
    let ratio = log_ratio.exp();
    if ratio.is_nan() {
        clip_max
    } else {
        ratio.min(clip_max)
    }
}

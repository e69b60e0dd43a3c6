//! Plain LOCO (`psi_L`) and its screened variant (`psi_1`).
//!
//! `psi_L` is the difference of mean squared residuals with and without the
//! `X` block. The plug-in difference already has second-order bias in the
//! nuisance error, so no influence correction is applied. `psi_1` first
//! drops every `Z` coordinate whose aggregated absolute Pearson correlation
//! with the `X` coordinates exceeds a threshold, then estimates `psi_L` on
//! the reduced covariate set.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::Result;
use crate::nuisance::Predictor;

use super::{FoldContext, FoldDiagnostics};

/// Outcome of correlation screening.
#[derive(Debug, Clone)]
pub struct ScreeningResult {
    /// Z columns kept (aggregated correlation at or below the threshold).
    pub kept: Vec<usize>,
    /// Z columns dropped.
    pub dropped: Vec<usize>,
    /// Aggregated absolute Pearson correlation per Z column.
    pub aggregated: Vec<f64>,
    /// Columns whose correlation was treated as zero because a variance
    /// vanished.
    pub zero_variance: Vec<usize>,
}

/// For each `Z` column, sum the absolute Pearson correlations with every
/// `X` column and keep the columns at or below `threshold`. Zero-variance
/// columns count as correlation zero (with a warning entry).
pub fn screen_covariates(data: &Dataset, threshold: f64) -> ScreeningResult {
    let n = data.n() as f64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut aggregated = Vec::with_capacity(data.h());
    let mut zero_variance = Vec::new();

    let x_means: Vec<f64> = (0..data.g()).map(|j| data.x.column(j).mean()).collect();
    let x_sds: Vec<f64> = (0..data.g())
        .map(|j| {
            (data.x.column(j).iter().map(|v| (v - x_means[j]).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();

    for zj in 0..data.h() {
        let z_col = data.z.column(zj);
        let z_mean = z_col.mean();
        let z_sd = (z_col.iter().map(|v| (v - z_mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut total = 0.0;
        let mut degenerate = false;
        for xi in 0..data.g() {
            if z_sd == 0.0 || x_sds[xi] == 0.0 {
                degenerate = true;
                continue;
            }
            let mut cov = 0.0;
            for i in 0..data.n() {
                cov += (data.x[(i, xi)] - x_means[xi]) * (z_col[i] - z_mean);
            }
            total += (cov / n / (x_sds[xi] * z_sd)).abs();
        }
        if degenerate {
            zero_variance.push(zj);
        }
        aggregated.push(total);
        if total <= threshold {
            kept.push(zj);
        } else {
            dropped.push(zj);
        }
    }
    ScreeningResult { kept, dropped, aggregated, zero_variance }
}

/// The LOCO value on explicit prediction vectors:
/// mean squared residual without `X` minus mean squared residual with `X`.
pub fn psi_l_value(y: &nalgebra::DVector<f64>, mu_z: &DMatrix<f64>, mu_xz: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let mut without_x = 0.0;
    let mut with_x = 0.0;
    for i in 0..y.len() {
        without_x += (y[i] - mu_z[(i, 0)]).powi(2);
        with_x += (y[i] - mu_xz[(i, 0)]).powi(2);
    }
    (without_x - with_x) / n
}

pub fn psi_l_fold(
    ctx: &FoldContext,
    z_cols: &[usize],
    mu_z: &dyn Predictor,
    mu_xz: &dyn Predictor,
) -> Result<(f64, FoldDiagnostics)> {
    let feats_z = ctx.features_for(&ctx.eval, false, z_cols);
    let feats_xz = ctx.features_for(&ctx.eval, true, z_cols);
    let pred_z = mu_z.predict(&feats_z)?;
    let pred_xz = mu_xz.predict(&feats_xz)?;
    let value = psi_l_value(&ctx.eval.y, &pred_z, &pred_xz);
    let y_mat = DMatrix::from_column_slice(ctx.eval.n(), 1, ctx.eval.y.as_slice());
    let diag = FoldDiagnostics {
        nuisance_rmse: vec![super::rmse(&pred_z, &y_mat), super::rmse(&pred_xz, &y_mat)],
        ..Default::default()
    };
    Ok((value, diag))
}

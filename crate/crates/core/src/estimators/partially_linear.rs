//! Decorrelated importance under the partially linear model
//! `E[Y|X,Z] = beta^T X + f(Z)`, where it reduces to
//! `psi_2 = beta^T Sigma_X beta`.
//!
//! `beta` solves the residual normal equations
//! `E[(X - nu(Z))(X - nu(Z))^T] beta = E[(X - nu(Z))(Y - mu(Z))]`, an
//! orthogonal estimating equation: its bias is second order in the nuisance
//! errors and involves the product of the two, so one accurately estimated
//! nuisance suffices for consistency (double robustness). The one-step
//! estimator adds the sample mean of the influence function
//!
//! ```text
//! phi = 2 beta^T Sigma_X phi_beta + beta^T (X - m_X)(X - m_X)^T beta - psi_2
//! phi_beta = Sigma_X^{-1} (X - nu(Z)) { (Y - mu(Z)) - (X - nu(Z))^T beta }
//! ```
//!
//! which vanishes term by term when `beta` and the moments come from the
//! same evaluation fold, and corrects first-order error when they do not.

use nalgebra::{DMatrix, DVector};

use crate::data::{solve_sym, solve_sym_vec, MomentSummary};
use crate::error::Result;
use crate::nuisance::Predictor;

use super::{FoldContext, FoldDiagnostics};

/// Fitted residual regression coefficient with solve diagnostics.
#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: DVector<f64>,
    pub ridge_fallback: bool,
    pub singular: bool,
    pub condition: f64,
}

/// Residual normal equations on explicit residual matrices:
/// `beta = [sum rx rx^T]^{-1} sum rx ry`.
pub fn fit_beta_partially_linear(resid_x: &DMatrix<f64>, resid_y: &DVector<f64>) -> BetaFit {
    let n = resid_x.nrows() as f64;
    let gram = resid_x.transpose() * resid_x / n;
    let cross = resid_x.transpose() * resid_y / n;
    let (beta, diag) = solve_sym_vec(&gram, &cross);
    BetaFit {
        beta,
        ridge_fallback: diag.ridge_fallback,
        singular: diag.singular,
        condition: diag.cond,
    }
}

/// Influence function of `beta`, one row per observation:
/// `phi_beta(U_i) = Sigma_X^{-1} rx_i (ry_i - rx_i^T beta)`.
pub fn phi_beta(
    resid_x: &DMatrix<f64>,
    resid_y: &DVector<f64>,
    beta: &DVector<f64>,
    sigma_x: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = resid_x.nrows();
    let g = resid_x.ncols();
    let mut scaled = DMatrix::zeros(n, g);
    for i in 0..n {
        let eps = resid_y[i] - resid_x.row(i).transpose().dot(beta);
        for j in 0..g {
            scaled[(i, j)] = resid_x[(i, j)] * eps;
        }
    }
    // rows are phi^T, so solve Sigma_X on the transposed stack
    let (solved, _) = solve_sym(sigma_x, &scaled.transpose());
    solved.transpose()
}

pub struct Psi2Parts {
    pub value: f64,
    pub plugin: f64,
    pub beta: BetaFit,
}

/// One-step `psi_2` from residuals and in-fold moments. The first term
/// centers `X` at its sample mean (the quadratic form of the influence
/// function), and the correction term uses `phi_beta` as displayed.
pub fn psi2_from_residuals(
    resid_x: &DMatrix<f64>,
    resid_y: &DVector<f64>,
    moments: &MomentSummary,
) -> Psi2Parts {
    let beta = fit_beta_partially_linear(resid_x, resid_y);
    let plugin = (moments.sigma_x.clone() * &beta.beta).dot(&beta.beta);
    let phi = phi_beta(resid_x, resid_y, &beta.beta, &moments.sigma_x);
    let n = resid_x.nrows() as f64;
    let lever = moments.sigma_x.clone() * &beta.beta; // Sigma_X beta
    let mut correction = 0.0;
    for i in 0..resid_x.nrows() {
        correction += 2.0 * phi.row(i).transpose().dot(&lever);
    }
    correction /= n;
    Psi2Parts { value: plugin + correction, plugin, beta }
}

pub fn psi2_fold(
    ctx: &FoldContext,
    nu: &dyn Predictor,
    mu_z: &dyn Predictor,
) -> Result<(f64, FoldDiagnostics)> {
    let eval = &ctx.eval;
    let nu_hat = nu.predict(&eval.z)?;
    let mu_hat = mu_z.predict(&eval.z)?;
    let resid_x = &eval.x - &nu_hat;
    let resid_y = &eval.y - mu_hat.column(0).into_owned();
    let moments = ctx.eval_moments()?;
    let parts = psi2_from_residuals(&resid_x, &resid_y, moments);
    let diag = FoldDiagnostics {
        ridge_fallback: parts.beta.ridge_fallback,
        singular: parts.beta.singular,
        condition: Some(parts.beta.condition),
        plugin_value: Some(parts.plugin),
        nuisance_rmse: vec![
            (resid_x.norm_squared() / eval.n() as f64).sqrt(),
            (resid_y.norm_squared() / eval.n() as f64).sqrt(),
        ],
        ..Default::default()
    };
    Ok((parts.value, diag))
}

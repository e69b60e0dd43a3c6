//! Decorrelated importance under the partially linear model with
//! `X`-by-`Z` interactions, where it becomes the quadratic form
//! `psi_3 = theta^T Omega theta`.
//!
//! Writing `ztilde = (1, Z)` and `W = vec(X ztilde^T) = ztilde ⊗ X`
//! (the `X` index moving fastest), the model is `Y = theta^T W + f(Z) + eps`
//! and
//!
//! ```text
//! theta = { E[ ztilde ztilde^T ⊗ (X-nu(Z))(X-nu(Z))^T ] }^{-1}
//!         E[ (Y - mu(Z)) (ztilde ⊗ (X - nu(Z))) ]
//! Omega = E[ ztilde ztilde^T ] ⊗ Sigma_X
//!       = [[1, m_Z^T], [m_Z, Gamma]] ⊗ Sigma_X,   Gamma = Sigma_Z + m_Z m_Z^T
//! ```
//!
//! The one-step estimator is the plug-in `theta^T Omega theta` plus the mean
//! of `2 theta^T Omega phi_theta(U) + theta^T Omega_inf(U) theta`, where
//! `phi_theta` is the least-squares influence of `theta` and `Omega_inf` the
//! influence of the moment matrix `Omega` (see [`omega_influence`]). Both
//! corrections average to zero when `theta` and the moments come from the
//! evaluation fold itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{interaction_features, kronecker, solve_sym_vec, MomentSummary};
use crate::error::Result;
use crate::nuisance::Predictor;

use super::{FoldContext, FoldDiagnostics};

/// Least-squares fit of the interaction-model coefficient vector.
#[derive(Debug, Clone)]
pub struct ThetaFit {
    /// `theta = vec(Theta)`, length `g (h+1)`, `X` index fastest.
    pub theta: DVector<f64>,
    /// First `g` entries: the main-effect block `beta`.
    pub beta_block: DVector<f64>,
    /// `g x h` interaction matrix (entry `(j,k)` multiplies `X_j Z_k`).
    pub gamma_block: DMatrix<f64>,
    /// Sample `E[R R^T]` of the residual interaction features.
    pub gram: DMatrix<f64>,
    pub ridge_fallback: bool,
    pub singular: bool,
    pub condition: f64,
}

/// Fit `theta` by least squares of the residual response on the residual
/// interaction features `R_i = ztilde_i ⊗ (x_i - nu_hat_i)`.
pub fn fit_theta_interactions(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    resid_y: &DVector<f64>,
    nu_hat: &DMatrix<f64>,
) -> ThetaFit {
    let n = x.nrows();
    let g = x.ncols();
    let h = z.ncols();
    let d = g * (h + 1);
    let mut gram = DMatrix::zeros(d, d);
    let mut cross = DVector::zeros(d);
    for i in 0..n {
        let rx = DVector::from_iterator(g, (0..g).map(|j| x[(i, j)] - nu_hat[(i, j)]));
        let zi = z.row(i).transpose();
        let r = interaction_features(&rx, &zi);
        gram.syger(1.0, &r, &r, 1.0);
        cross.axpy(resid_y[i], &r, 1.0);
    }
    // syger fills the lower triangle only
    for a in 0..d {
        for b in (a + 1)..d {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    gram /= n as f64;
    cross /= n as f64;
    let (theta, diag) = solve_sym_vec(&gram, &cross);
    let beta_block = theta.rows(0, g).into_owned();
    let mut gamma_block = DMatrix::zeros(g, h);
    for k in 0..h {
        for j in 0..g {
            gamma_block[(j, k)] = theta[(k + 1) * g + j];
        }
    }
    ThetaFit {
        theta,
        beta_block,
        gamma_block,
        gram,
        ridge_fallback: diag.ridge_fallback,
        singular: diag.singular,
        condition: diag.cond,
    }
}

/// Second-moment matrix of `ztilde = (1, Z)`.
fn ztilde_moment(moments: &MomentSummary) -> DMatrix<f64> {
    let h = moments.m_z.len();
    let mut m = DMatrix::zeros(h + 1, h + 1);
    m[(0, 0)] = 1.0;
    for k in 0..h {
        m[(0, k + 1)] = moments.m_z[k];
        m[(k + 1, 0)] = moments.m_z[k];
        for l in 0..h {
            m[(k + 1, l + 1)] = moments.gamma[(k, l)];
        }
    }
    m
}

/// `Omega = E[ztilde ztilde^T] ⊗ Sigma_X`, ordered to match
/// [`interaction_features`] (the `X` index moving fastest).
pub fn build_omega(moments: &MomentSummary) -> DMatrix<f64> {
    kronecker(&ztilde_moment(moments), &moments.sigma_x)
}

/// Influence function of the plug-in `Omega` at one observation:
/// the product rule over its two moment factors,
///
/// ```text
/// Omega_inf(u) = M ⊗ [ (x-m_X)(x-m_X)^T - Sigma_X ]
///              + [[0, (z-m_Z)^T], [z-m_Z, Gamma_inf]] ⊗ Sigma_X
/// Gamma_inf = (z-m_Z)(z-m_Z)^T - Sigma_Z + m_Z (z-m_Z)^T + (z-m_Z) m_Z^T
/// ```
///
/// with `M` the `ztilde` second moment. Averaged over the sample whose
/// moments are plugged in, every centered term cancels and the mean is the
/// zero matrix (the covariance denominator is `n` for exactly this reason).
pub fn omega_influence(
    x_row: &DVector<f64>,
    z_row: &DVector<f64>,
    moments: &MomentSummary,
) -> DMatrix<f64> {
    let xc = x_row - &moments.m_x;
    let zc = z_row - &moments.m_z;
    let sigma_x_inf = &xc * xc.transpose() - &moments.sigma_x;
    let h = z_row.len();
    let mut m_inf = DMatrix::zeros(h + 1, h + 1);
    let gamma_inf = &zc * zc.transpose() - &moments.sigma_z
        + &moments.m_z * zc.transpose()
        + &zc * moments.m_z.transpose();
    for k in 0..h {
        m_inf[(0, k + 1)] = zc[k];
        m_inf[(k + 1, 0)] = zc[k];
        for l in 0..h {
            m_inf[(k + 1, l + 1)] = gamma_inf[(k, l)];
        }
    }
    kronecker(&ztilde_moment(moments), &sigma_x_inf) + kronecker(&m_inf, &moments.sigma_x)
}

pub fn theta_for_fold(
    ctx: &FoldContext,
    nu: &dyn Predictor,
    mu_z: &dyn Predictor,
) -> Result<ThetaFit> {
    let eval = &ctx.eval;
    let nu_hat = nu.predict(&eval.z)?;
    let mu_hat = mu_z.predict(&eval.z)?;
    let resid_y = &eval.y - mu_hat.column(0).into_owned();
    Ok(fit_theta_interactions(&eval.x, &eval.z, &resid_y, &nu_hat))
}

pub fn psi3_fold(
    ctx: &FoldContext,
    nu: &dyn Predictor,
    mu_z: &dyn Predictor,
) -> Result<(f64, FoldDiagnostics)> {
    let eval = &ctx.eval;
    let nu_hat = nu.predict(&eval.z)?;
    let mu_hat = mu_z.predict(&eval.z)?;
    let resid_y = &eval.y - mu_hat.column(0).into_owned();
    let theta_fit = fit_theta_interactions(&eval.x, &eval.z, &resid_y, &nu_hat);
    let moments = ctx.eval_moments()?;
    let omega = build_omega(moments);

    let plugin = (omega.clone() * &theta_fit.theta).dot(&theta_fit.theta);

    // one-step corrections, both mean zero for in-fold theta and moments
    let lever = &omega * &theta_fit.theta;
    let (gram_inv_lever, _) = solve_sym_vec(&theta_fit.gram, &lever);
    let n = eval.n();
    let mut correction = 0.0;
    for i in 0..n {
        let rx = DVector::from_iterator(
            eval.g(),
            (0..eval.g()).map(|j| eval.x[(i, j)] - nu_hat[(i, j)]),
        );
        let zi = eval.z.row(i).transpose();
        let r = interaction_features(&rx, &zi);
        let eps = resid_y[i] - r.dot(&theta_fit.theta);
        // 2 theta^T Omega phi_theta(U_i), with phi_theta = gram^{-1} R eps
        correction += 2.0 * eps * gram_inv_lever.dot(&r);
        let omega_inf = omega_influence(&eval.x.row(i).transpose(), &zi, moments);
        correction += (omega_inf * &theta_fit.theta).dot(&theta_fit.theta);
    }
    correction /= n as f64;

    let diag = FoldDiagnostics {
        ridge_fallback: theta_fit.ridge_fallback,
        singular: theta_fit.singular,
        condition: Some(theta_fit.condition),
        plugin_value: Some(plugin),
        ..Default::default()
    };
    Ok((plugin + correction, diag))
}

/// Closed-form derivative-importance and g-formula-variance values under the
/// two semiparametric models, from a fitted `theta` and sample moments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuxiliaryValues {
    /// `||beta||^2`: mean squared gradient under the partially linear model.
    pub derivative_partially_linear: f64,
    /// `E||beta + G Z||^2` under the interaction model.
    pub derivative_interactions: f64,
    /// `beta^T Sigma_X beta`: variance of the covariate-shift mean under the
    /// partially linear model.
    pub gformula_variance_partially_linear: f64,
    /// `(beta + G m_Z)^T Sigma_X (beta + G m_Z)` under the interaction model.
    pub gformula_variance_interactions: f64,
}

/// Evaluate the closed-form auxiliaries. The interaction-model derivative
/// value is the exact `E||beta + G Z||^2 = ||beta||^2 + 2 beta^T G m_Z +
/// tr(G^T G E[Z Z^T])`, which reduces to the familiar two-term form when
/// `m_Z = 0`.
pub fn closed_form_auxiliaries(theta: &ThetaFit, moments: &MomentSummary) -> AuxiliaryValues {
    let beta = &theta.beta_block;
    let g_mat = &theta.gamma_block;
    let norm_beta2 = beta.norm_squared();
    let gm = g_mat * &moments.m_z;
    let deriv_int = norm_beta2 + 2.0 * beta.dot(&gm) + (g_mat.transpose() * g_mat * &moments.gamma).trace();
    let shifted = beta + gm;
    let gf_pl = (moments.sigma_x.clone() * beta).dot(beta);
    let gf_int = (moments.sigma_x.clone() * &shifted).dot(&shifted);
    AuxiliaryValues {
        derivative_partially_linear: norm_beta2,
        derivative_interactions: deriv_int,
        gformula_variance_partially_linear: gf_pl,
        gformula_variance_interactions: gf_int,
    }
}

/// Closed form of plain LOCO under the interaction model: the quadratic form
/// `theta^T (O_11 + O_12 + O_21 + O_22) theta` whose blocks share the
/// `ztilde` moment factor and decompose `E[(X - nu)(X - nu)^T]` around the
/// mean of `X`:
///
/// ```text
/// O_11 = M ⊗ Sigma_X                      O_12 = M ⊗ E[(X-m_X)(m_X-nu(Z))^T]
/// O_21 = M ⊗ E[(m_X-nu(Z))(X-m_X)^T]      O_22 = M ⊗ E[(m_X-nu(Z))(m_X-nu(Z))^T]
/// ```
///
/// When `nu(Z)` is constant at `m_X` (decorrelated case) the cross blocks
/// vanish and the value collapses to `theta^T Omega theta`.
pub fn psi_l_semiparametric_closed_form(
    theta: &ThetaFit,
    moments: &MomentSummary,
    x: &DMatrix<f64>,
    nu_hat: &DMatrix<f64>,
) -> f64 {
    let n = x.nrows();
    let g = x.ncols();
    let nf = n as f64;
    let mut cross = DMatrix::zeros(g, g); // E[(X - m_X)(m_X - nu)^T]
    let mut outer = DMatrix::zeros(g, g); // E[(m_X - nu)(m_X - nu)^T]
    for i in 0..n {
        let xc = DVector::from_iterator(g, (0..g).map(|j| x[(i, j)] - moments.m_x[j]));
        let d = DVector::from_iterator(g, (0..g).map(|j| moments.m_x[j] - nu_hat[(i, j)]));
        cross += &xc * d.transpose();
        outer += &d * d.transpose();
    }
    cross /= nf;
    outer /= nf;
    let inner = &moments.sigma_x + &cross + cross.transpose() + outer;
    let total = kronecker(&ztilde_moment(moments), &inner);
    (total * &theta.theta).dot(&theta.theta)
}

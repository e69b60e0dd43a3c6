//! Decorrelated importance under the varying-coefficient model
//! `E[Y|X,Z] = X^T beta(Z) + f(Z)`, where it becomes
//! `psi_4 = tr(Sigma_X H)` with `H = E[beta(Z) beta(Z)^T]` and
//! `beta(z) = V(z)^{-1} C(z)`, `V(z) = Var[X|Z=z]`, `C(z) = Cov[X,Y|Z=z]`.
//!
//! Conditional second moments come from regressing the elementwise products
//! `X_a X_b` and `X_a Y` on `Z` with the same nuisance family and
//! subtracting the first-moment products. `V(z)` is projected to the PSD
//! cone with an eigenvalue floor of `1e-6` before inversion; rows where the
//! floor actually had to act are treated as singular and skipped (with a
//! diagnostic count), because a floored direction turns moment-estimation
//! noise into unbounded coefficients.
//!
//! The estimator is the one-step
//!
//! ```text
//! psi_4 = mean_i tr(Sigma_X phi_H(U_i)) + mean_i (X_i - m_X)^T H (X_i - m_X)
//! phi_H = beta beta^T - H + beta w^T + w beta^T
//! w     = V^{-1} (X - nu(Z)) { (Y - mu(Z)) - (X - nu(Z))^T beta }
//! ```
//!
//! `w` is the influence of `beta(z) = V^{-1}(z) C(z)` through the
//! conditional covariances, so the response and covariates enter centered
//! at their conditional means; its conditional mean vanishes at the truth,
//! and the two `H`-dependent pieces recombine into the plug-in
//! `tr(Sigma_X H)` plus mean-zero corrections.

use nalgebra::{DMatrix, DVector};

use crate::data::psd_floor;
use crate::error::Result;
use crate::nuisance::Predictor;

use super::{FoldContext, FoldDiagnostics};

const V_EIGENVALUE_FLOOR: f64 = 1e-6;

pub fn psi4_fold(
    ctx: &FoldContext,
    nu: &dyn Predictor,
    mu_z: &dyn Predictor,
    xx_fit: &dyn Predictor,
    xy_fit: &dyn Predictor,
) -> Result<(f64, FoldDiagnostics)> {
    let eval = &ctx.eval;
    let n = eval.n();
    let g = eval.g();
    let nu_hat = nu.predict(&eval.z)?;
    let mu_hat = mu_z.predict(&eval.z)?.column(0).into_owned();
    let xx_hat = xx_fit.predict(&eval.z)?;
    let xy_hat = xy_fit.predict(&eval.z)?;
    let moments = ctx.eval_moments()?;

    let pairs: Vec<(usize, usize)> = (0..g).flat_map(|a| (a..g).map(move |b| (a, b))).collect();

    // per-row varying coefficients
    let mut betas: Vec<Option<(DVector<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)>> =
        Vec::with_capacity(n);
    let mut h_mat = DMatrix::zeros(g, g);
    let mut used = 0usize;
    for i in 0..n {
        let nu_i = nu_hat.row(i).transpose();
        let mut second = DMatrix::zeros(g, g);
        for (k, &(a, b)) in pairs.iter().enumerate() {
            second[(a, b)] = xx_hat[(i, k)];
            second[(b, a)] = xx_hat[(i, k)];
        }
        let v_raw = second - &nu_i * nu_i.transpose();
        let raw_min_eig = {
            let sym = (&v_raw + v_raw.transpose()) * 0.5;
            sym.symmetric_eigen().eigenvalues.min()
        };
        if !(raw_min_eig >= V_EIGENVALUE_FLOOR) {
            betas.push(None);
            continue;
        }
        let v = psd_floor(&v_raw, V_EIGENVALUE_FLOOR);
        let c = xy_hat.row(i).transpose() - &nu_i * mu_hat[i];
        match v.cholesky() {
            Some(chol) => {
                let beta = chol.solve(&c);
                if beta.iter().all(|v| v.is_finite()) {
                    h_mat.syger(1.0, &beta, &beta, 1.0);
                    used += 1;
                    betas.push(Some((beta, chol)));
                } else {
                    betas.push(None);
                }
            }
            None => betas.push(None),
        }
    }
    if used == 0 {
        return Ok((
            f64::NAN,
            FoldDiagnostics {
                singular: true,
                skipped_rows: Some(n),
                ..Default::default()
            },
        ));
    }
    for a in 0..g {
        for b in (a + 1)..g {
            h_mat[(a, b)] = h_mat[(b, a)];
        }
    }
    h_mat /= used as f64;
    let plugin = (moments.sigma_x.clone() * &h_mat).trace();

    // one-step: mean tr(Sigma_X phi_H) + mean (X - m_X)^T H (X - m_X)
    let mut value = 0.0;
    for i in 0..n {
        let Some((beta, chol)) = &betas[i] else { continue };
        let x_i = eval.x.row(i).transpose();
        let xc = &x_i - &moments.m_x;
        let rx = &x_i - nu_hat.row(i).transpose();
        let resid_y = eval.y[i] - mu_hat[i];

        // w = V^{-1} (X - nu) { (Y - mu(Z)) - (X - nu)^T beta }
        let w = chol.solve(&(&rx * (resid_y - rx.dot(beta))));
        let mut phi_h = beta * beta.transpose() - &h_mat;
        phi_h += beta * w.transpose() + &w * beta.transpose();
        value += (moments.sigma_x.clone() * phi_h).trace();
        value += (xc.transpose() * &h_mat * &xc)[(0, 0)];
    }
    value /= used as f64;

    let diag = FoldDiagnostics {
        skipped_rows: Some(n - used),
        plugin_value: Some(plugin),
        ..Default::default()
    };
    Ok((value, diag))
}

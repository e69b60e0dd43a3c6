//! Decorrelated partial correlation for scalar `X`:
//!
//! ```text
//! rho_0 = num / sqrt(var_X * denom)
//! num   = ∫∫ (mu(x,z) - mu_0(z)) (x - m_X) p(x) p(z) dx dz
//! denom = E_0[(Y - mu_0(Z))^2]
//!       = ∫∫ [ sigma^2(x,z) + (mu(x,z) - mu_0(z))^2 ] p(x) p(z) dx dz
//! ```
//!
//! The numerator is a Monte Carlo covariance over the kernel-density draws.
//! The denominator integral splits into the squared-deviation integral
//! (the machine's plug-in value) plus the conditional response variance,
//! estimated from in-fold residuals. The one-step correction combines the
//! three components by the delta method,
//!
//! ```text
//! phi = [ phi_num - (num / 2 var_X) phi_var - (num / 2 denom) phi_den ]
//!       / sqrt(var_X * denom)
//! ```
//!
//! with the density-ratio terms in `phi_num` and `phi_den` clipped. Every
//! Monte Carlo covariance is centered at the draw means, so a fit that is
//! exactly constant in `x` produces an exactly null numerator.

use crate::error::{Error, Result};

use super::psi0::Psi0Machine;
use super::{FoldContext, FoldDiagnostics};

pub fn rho0_fold(ctx: &FoldContext, machine: &Psi0Machine) -> Result<(f64, FoldDiagnostics)> {
    let eval = &ctx.eval;
    if eval.g() != 1 {
        return Err(Error::UnsupportedParameter {
            parameter: "rho_0".into(),
            reason: format!("defined for scalar X, got g = {}", eval.g()),
        });
    }
    let rows = machine.eval_rows(eval)?;
    let n = eval.n();
    let nf = n as f64;
    let moments = ctx.eval_moments()?;
    let m_x = moments.m_x[0];
    let var_x = moments.sigma_x[(0, 0)];

    // numerator: centered covariance of the X draws with the X-marginal
    // mean function, over the Monte Carlo sample
    let n_draws = machine.n_draws();
    let mu0x_mean = machine.mu0x_at_drawn_x.mean();
    let mut num = 0.0;
    for j in 0..n_draws {
        num += (machine.draws_x[(j, 0)] - machine.x_draw_means[0])
            * (machine.mu0x_at_drawn_x[j] - mu0x_mean);
    }
    num /= n_draws as f64;

    // denominator: deviation integral plus conditional response variance
    let sigma2 = (0..n).map(|i| (eval.y[i] - rows.mu_at[i]).powi(2)).sum::<f64>() / nf;
    let denom = machine.psi_plugin + sigma2;

    if !(var_x > 0.0) || !(denom > 0.0) {
        let diag = FoldDiagnostics { singular: true, ..Default::default() };
        return Ok((f64::NAN, diag));
    }
    let scale = (var_x * denom).sqrt();
    let plugin = num / scale;

    // one-step correction by the delta method over (num, var_X, denom)
    let mut phi_mean = 0.0;
    for i in 0..n {
        let xc = eval.x[(i, 0)] - m_x;
        let resid = eval.y[i] - rows.mu_at[i];
        let dev = rows.mu_at[i] - rows.mu0_at_z[i];
        let phi_num = (rows.mu0x_at_x[i] - machine.m_mu) * xc
            + rows.ratio[i] * xc * resid
            + rows.x_cov_at_z[(i, 0)]
            - 2.0 * num;
        let phi_var = xc * xc - var_x;
        // influence of E_0[(Y - mu_0(Z))^2]: reweighted excess over the
        // conditional second moment, plus both marginal integrals
        let s_hat = sigma2 + dev * dev;
        let phi_den = rows.ratio[i] * ((eval.y[i] - rows.mu0_at_z[i]).powi(2) - s_hat)
            + (sigma2 + rows.term2[i])
            + (sigma2 + rows.term1[i])
            - 2.0 * denom;
        phi_mean +=
            (phi_num - num / (2.0 * var_x) * phi_var - num / (2.0 * denom) * phi_den) / scale;
    }
    phi_mean /= nf;

    let clip_frac = rows.clip_count as f64 / nf;
    let diag = FoldDiagnostics {
        clip_count: Some(rows.clip_count),
        clip_warning: clip_frac > 0.10,
        plugin_value: Some(plugin),
        nuisance_rmse: vec![sigma2.sqrt()],
        ..Default::default()
    };
    Ok((plugin + phi_mean, diag))
}

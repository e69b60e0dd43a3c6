//! Fully nonparametric decorrelated LOCO,
//! `psi_0 = ∫∫ (mu(x,z) - mu_0(z))^2 p(x) p(z) dx dz` with
//! `mu_0(z) = ∫ mu(x,z) p(x) dx`.
//!
//! Marginal and joint densities are kernel estimates; every integral is a
//! Monte Carlo average over draws `X*_1..X*_N ~ p_hat(x)` and
//! `Z*_1..Z*_N ~ p_hat(z)`. The per-observation kernel of the estimating
//! equation is
//!
//! ```text
//! L(U) = ∫ (mu(x,Z) - mu_0(Z))^2 p(x) dx
//!      + ∫ (mu(X,z) - mu_0(z))^2 p(z) dz
//!      + 2 [p(X)p(Z)/p(X,Z)] (mu(X,Z) - mu_0(Z)) (Y - mu(X,Z))
//! ```
//!
//! giving the estimating-equation estimator `mean(L)/2` (the default) and
//! the one-step estimator `psi_pi + mean(L - 2 psi_pi) = mean(L) - psi_pi`.
//! The density ratio is clipped, which bounds the influence-term variance in
//! the empty regions created by strong X–Z dependence at the cost of bias.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::density::{density_ratio, fit_kde, kde_sample, KdeConfig, KdeModel};
use crate::error::Result;
use crate::nuisance::Predictor;
use crate::rng;

use super::{FoldContext, FoldDiagnostics};

/// Out-of-fold densities, Monte Carlo draws, and cached draw-level averages
/// shared by `psi_0` and `rho_0`.
pub struct Psi0Machine {
    pub kde_x: KdeModel,
    pub kde_z: KdeModel,
    pub kde_xz: KdeModel,
    mu: Rc<dyn Predictor>,
    pub draws_x: DMatrix<f64>,
    pub draws_z: DMatrix<f64>,
    pub clip_max: f64,
    /// `mu_0(Z*_j) = mean_s mu(X*_s, Z*_j)`.
    pub mu0_at_drawn_z: DVector<f64>,
    /// `mean_s mu(X*_j, Z*_s)`, the X-marginal mean function at the draws.
    pub mu0x_at_drawn_x: DVector<f64>,
    /// Grand mean of `mu` over the product of draws.
    pub m_mu: f64,
    /// Plug-in value `mean_j (mu(X*_j, Z*_j) - mu_0(Z*_j))^2`.
    pub psi_plugin: f64,
    /// Column means of the X draws (used to center Monte Carlo covariances
    /// so that exactly null fits produce exactly null estimates).
    pub x_draw_means: DVector<f64>,
    eval_cache: RefCell<Option<Rc<Psi0EvalRows>>>,
}

impl Psi0Machine {
    /// Fit the three kernel densities on the training split, draw the Monte
    /// Carlo samples, and precompute the draw-level averages.
    pub fn build(
        train: &Dataset,
        mu: Rc<dyn Predictor>,
        config: KdeConfig,
        seed: u64,
    ) -> Result<Self> {
        let kde_x = fit_kde(&train.x)?;
        let kde_z = fit_kde(&train.z)?;
        let kde_xz = fit_kde(&train.xz())?;
        let draws_x = kde_sample(&kde_x, config.mc_draws, rng::derive_seed(seed, "draws-x", 0));
        let draws_z = kde_sample(&kde_z, config.mc_draws, rng::derive_seed(seed, "draws-z", 0));
        Self::from_parts(kde_x, kde_z, kde_xz, mu, draws_x, draws_z, config.clip_max)
    }

    /// Assemble from explicit parts (tests inject oracle regressors and
    /// fixed draws through this).
    pub fn from_parts(
        kde_x: KdeModel,
        kde_z: KdeModel,
        kde_xz: KdeModel,
        mu: Rc<dyn Predictor>,
        draws_x: DMatrix<f64>,
        draws_z: DMatrix<f64>,
        clip_max: f64,
    ) -> Result<Self> {
        let n_draws = draws_x.nrows();
        let g = draws_x.ncols();
        let h = draws_z.ncols();
        let mut mu0_at_drawn_z = DVector::zeros(n_draws);
        let mut mu0x_at_drawn_x = DVector::zeros(n_draws);
        let mut psi_plugin = 0.0;
        // one pass over z draws, each batch evaluating mu at every x draw
        let mut feats = DMatrix::zeros(n_draws, g + h);
        feats.view_mut((0, 0), (n_draws, g)).copy_from(&draws_x);
        for j in 0..n_draws {
            for c in 0..h {
                let v = draws_z[(j, c)];
                for r in 0..n_draws {
                    feats[(r, g + c)] = v;
                }
            }
            let preds = mu.predict(&feats)?;
            let mean = preds.column(0).mean();
            mu0_at_drawn_z[j] = mean;
            psi_plugin += (preds[(j, 0)] - mean).powi(2);
            for s in 0..n_draws {
                mu0x_at_drawn_x[s] += preds[(s, 0)];
            }
        }
        mu0x_at_drawn_x /= n_draws as f64;
        psi_plugin /= n_draws as f64;
        let m_mu = mu0_at_drawn_z.mean();
        let x_draw_means =
            DVector::from_iterator(g, (0..g).map(|c| draws_x.column(c).mean()));
        Ok(Psi0Machine {
            kde_x,
            kde_z,
            kde_xz,
            mu,
            draws_x,
            draws_z,
            clip_max,
            mu0_at_drawn_z,
            mu0x_at_drawn_x,
            m_mu,
            psi_plugin,
            x_draw_means,
            eval_cache: RefCell::new(None),
        })
    }

    pub fn n_draws(&self) -> usize {
        self.draws_x.nrows()
    }

    /// Per-row Monte Carlo quantities on an evaluation set, cached (the
    /// machine lives inside one fold, so the evaluation set is fixed).
    pub fn eval_rows(&self, eval: &Dataset) -> Result<Rc<Psi0EvalRows>> {
        if let Some(hit) = self.eval_cache.borrow().as_ref() {
            return Ok(hit.clone());
        }
        let rows = Rc::new(Psi0EvalRows::compute(self, eval)?);
        *self.eval_cache.borrow_mut() = Some(rows.clone());
        Ok(rows)
    }
}

/// Monte Carlo integrals evaluated at each in-fold observation.
pub struct Psi0EvalRows {
    /// `mu(X_i, Z_i)`.
    pub mu_at: DVector<f64>,
    /// `mu_0(Z_i) = mean_j mu(X*_j, Z_i)`.
    pub mu0_at_z: DVector<f64>,
    /// `∫ (mu(x, Z_i) - mu_0(Z_i))^2 p(x) dx` by draws.
    pub term1: DVector<f64>,
    /// `∫ (mu(X_i, z) - mu_0(z))^2 p(z) dz` by draws.
    pub term2: DVector<f64>,
    /// `mean_j mu(X_i, Z*_j)`: the X-marginal mean function at `X_i`.
    pub mu0x_at_x: DVector<f64>,
    /// `mean_j (X*_j - mean X*) mu(X*_j, Z_i)` per X coordinate.
    pub x_cov_at_z: DMatrix<f64>,
    /// Clipped density ratio at `(X_i, Z_i)`.
    pub ratio: DVector<f64>,
    pub clip_count: usize,
}

impl Psi0EvalRows {
    fn compute(machine: &Psi0Machine, eval: &Dataset) -> Result<Self> {
        let n = eval.n();
        let g = eval.g();
        let h = eval.h();
        let n_draws = machine.n_draws();
        let nf = n_draws as f64;

        let mu_at = machine.mu.predict(&eval.xz())?.column(0).into_owned();

        let mut mu0_at_z = DVector::zeros(n);
        let mut term1 = DVector::zeros(n);
        let mut x_cov_at_z = DMatrix::zeros(n, g);
        // batch A: vary the x draw, hold the observation's z fixed
        let mut feats = DMatrix::zeros(n_draws, g + h);
        feats.view_mut((0, 0), (n_draws, g)).copy_from(&machine.draws_x);
        for i in 0..n {
            for c in 0..h {
                let v = eval.z[(i, c)];
                for r in 0..n_draws {
                    feats[(r, g + c)] = v;
                }
            }
            let preds = machine.mu.predict(&feats)?;
            let mean = preds.column(0).mean();
            mu0_at_z[i] = mean;
            let mut acc1 = 0.0;
            for j in 0..n_draws {
                let p = preds[(j, 0)];
                acc1 += (p - mean).powi(2);
                for c in 0..g {
                    x_cov_at_z[(i, c)] +=
                        (machine.draws_x[(j, c)] - machine.x_draw_means[c]) * p;
                }
            }
            term1[i] = acc1 / nf;
            for c in 0..g {
                x_cov_at_z[(i, c)] /= nf;
            }
        }

        let mut term2 = DVector::zeros(n);
        let mut mu0x_at_x = DVector::zeros(n);
        // batch B: vary the z draw, hold the observation's x fixed
        let mut feats = DMatrix::zeros(n_draws, g + h);
        feats.view_mut((0, g), (n_draws, h)).copy_from(&machine.draws_z);
        for i in 0..n {
            for c in 0..g {
                let v = eval.x[(i, c)];
                for r in 0..n_draws {
                    feats[(r, c)] = v;
                }
            }
            let preds = machine.mu.predict(&feats)?;
            let mut acc = 0.0;
            let mut acc_mean = 0.0;
            for j in 0..n_draws {
                acc += (preds[(j, 0)] - machine.mu0_at_drawn_z[j]).powi(2);
                acc_mean += preds[(j, 0)];
            }
            term2[i] = acc / nf;
            mu0x_at_x[i] = acc_mean / nf;
        }

        let mut ratio = DVector::zeros(n);
        let mut clip_count = 0;
        let mut x_buf = vec![0.0f64; g];
        let mut z_buf = vec![0.0f64; h];
        for i in 0..n {
            for c in 0..g {
                x_buf[c] = eval.x[(i, c)];
            }
            for c in 0..h {
                z_buf[c] = eval.z[(i, c)];
            }
            let r = density_ratio(
                &machine.kde_x,
                &machine.kde_z,
                &machine.kde_xz,
                &x_buf,
                &z_buf,
                machine.clip_max,
            );
            if r >= machine.clip_max {
                clip_count += 1;
            }
            ratio[i] = r;
        }

        Ok(Psi0EvalRows {
            mu_at,
            mu0_at_z,
            term1,
            term2,
            mu0x_at_x,
            x_cov_at_z,
            ratio,
            clip_count,
        })
    }

    /// The estimating-equation kernel `L(U_i)`.
    pub fn l_value(&self, i: usize, y: f64) -> f64 {
        self.term1[i]
            + self.term2[i]
            + 2.0 * self.ratio[i] * (self.mu_at[i] - self.mu0_at_z[i]) * (y - self.mu_at[i])
    }
}

/// Influence function `phi(U) = L(U) - 2 psi` at a single observation,
/// evaluated with the machine's fitted densities and draws.
pub fn psi0_influence(
    machine: &Psi0Machine,
    x_row: &DVector<f64>,
    z_row: &DVector<f64>,
    y: f64,
    psi_value: f64,
) -> Result<f64> {
    let one = Dataset::new(
        DMatrix::from_row_slice(1, x_row.len(), x_row.as_slice()),
        DMatrix::from_row_slice(1, z_row.len(), z_row.as_slice()),
        DVector::from_element(1, y),
        (0..x_row.len()).map(|j| format!("x{j}")).collect(),
        (0..z_row.len()).map(|j| format!("z{j}")).collect(),
        "y".into(),
    )?;
    let rows = Psi0EvalRows::compute(machine, &one)?;
    Ok(rows.l_value(0, y) - 2.0 * psi_value)
}

pub fn psi0_fold(
    ctx: &FoldContext,
    machine: &Psi0Machine,
) -> Result<(f64, FoldDiagnostics)> {
    let eval = &ctx.eval;
    let rows = machine.eval_rows(eval)?;
    let n = eval.n();
    let mean_l = (0..n).map(|i| rows.l_value(i, eval.y[i])).sum::<f64>() / n as f64;
    let value = if ctx.psi0_one_step {
        mean_l - machine.psi_plugin
    } else {
        mean_l / 2.0
    };
    let clip_frac = rows.clip_count as f64 / n as f64;
    let diag = FoldDiagnostics {
        clip_count: Some(rows.clip_count),
        clip_warning: clip_frac > 0.10,
        plugin_value: Some(machine.psi_plugin),
        ..Default::default()
    };
    Ok((value, diag))
}

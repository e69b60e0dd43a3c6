//! Point estimation of the importance parameters.
//!
//! Every estimator follows the same cross-fitting pattern: nuisance
//! regressions are fit on the out-of-fold rows, the parameter is evaluated
//! on the in-fold rows, and the per-fold estimates feed the conservative
//! t interval in [`crate::inference`]. Estimators that admit an efficient
//! influence function apply the one-step correction
//! `psi_hat = psi_plugin + mean(phi_hat)` on the evaluation fold.

mod interactions;
mod partially_linear;
mod psi0;
mod psi_l;
mod rho0;
mod varying_coefficient;

use std::cell::{OnceCell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, FoldAssignment, MomentSummary};
use crate::density::KdeConfig;
use crate::error::{Error, Result};
use crate::inference::{self, EstimateResult};
use crate::nuisance::{fit_regressor, FittedRegressor, NuisanceSpec};
use crate::rng;

pub use interactions::{
    build_omega, closed_form_auxiliaries, fit_theta_interactions, omega_influence,
    psi3_fold, psi_l_semiparametric_closed_form, theta_for_fold, AuxiliaryValues, ThetaFit,
};
pub use partially_linear::{
    fit_beta_partially_linear, phi_beta, psi2_fold, psi2_from_residuals, BetaFit, Psi2Parts,
};
pub use psi0::{psi0_fold, psi0_influence, Psi0EvalRows, Psi0Machine};
pub use psi_l::{psi_l_fold, psi_l_value, screen_covariates, ScreeningResult};
pub use rho0::rho0_fold;
pub use varying_coefficient::psi4_fold;

/// The estimable parameters, by their external identifier strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParameterId {
    #[serde(rename = "psi_L")]
    PsiL,
    #[serde(rename = "psi_0")]
    Psi0,
    #[serde(rename = "psi_1")]
    Psi1,
    #[serde(rename = "psi_2")]
    Psi2,
    #[serde(rename = "psi_3")]
    Psi3,
    #[serde(rename = "psi_4")]
    Psi4,
    #[serde(rename = "rho_0")]
    Rho0,
    #[serde(rename = "aux_derivative")]
    AuxDerivative,
    #[serde(rename = "aux_gformula")]
    AuxGformula,
}

impl ParameterId {
    pub const ALL: [ParameterId; 9] = [
        ParameterId::PsiL,
        ParameterId::Psi0,
        ParameterId::Psi1,
        ParameterId::Psi2,
        ParameterId::Psi3,
        ParameterId::Psi4,
        ParameterId::Rho0,
        ParameterId::AuxDerivative,
        ParameterId::AuxGformula,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParameterId::PsiL => "psi_L",
            ParameterId::Psi0 => "psi_0",
            ParameterId::Psi1 => "psi_1",
            ParameterId::Psi2 => "psi_2",
            ParameterId::Psi3 => "psi_3",
            ParameterId::Psi4 => "psi_4",
            ParameterId::Rho0 => "rho_0",
            ParameterId::AuxDerivative => "aux_derivative",
            ParameterId::AuxGformula => "aux_gformula",
        }
    }
}

impl FromStr for ParameterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParameterId::ALL
            .iter()
            .find(|p| p.as_str() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter id {s:?}")))
    }
}

impl std::fmt::Display for ParameterId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-fold diagnostics carried alongside each estimate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FoldDiagnostics {
    /// A solve needed ridge jitter.
    pub ridge_fallback: bool,
    /// A solve was rank deficient beyond repair; the fold estimate is not
    /// trustworthy and the pooled interval becomes infinite.
    pub singular: bool,
    /// Crude condition number of the worst solve involved.
    pub condition: Option<f64>,
    /// Density-ratio clip activations among evaluation rows.
    pub clip_count: Option<usize>,
    /// Clip activations as a fraction of evaluation rows, with a warning
    /// flag when more than 10% of rows were clipped.
    pub clip_warning: bool,
    /// In-fold root mean squared residual of each nuisance used.
    pub nuisance_rmse: Vec<f64>,
    /// Z columns removed by correlation screening (psi_1 only).
    pub screened_out: Option<Vec<usize>>,
    /// Screening removed every Z column; the estimate degenerates to the
    /// marginal importance of X.
    pub empty_screening_set: bool,
    /// Rows skipped because a conditional covariance was not invertible
    /// (psi_4 only).
    pub skipped_rows: Option<usize>,
    /// Plug-in value, for estimators whose headline value is one-step
    /// corrected or equation-solved.
    pub plugin_value: Option<f64>,
}

/// One parameter estimated on one evaluation fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub parameter_id: ParameterId,
    pub fold_index: usize,
    /// Finite unless `diagnostics.singular`, in which case the value is NaN
    /// and the pooled interval is infinite.
    pub value: f64,
    pub n_fold: usize,
    pub diagnostics: FoldDiagnostics,
}

/// Everything a cross-fitted estimation run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub parameters: Vec<ParameterId>,
    pub nuisance: NuisanceSpec,
    pub fold_count: usize,
    pub alpha: f64,
    /// Aggregated-correlation threshold for psi_1 screening.
    pub screening_threshold: f64,
    pub kde: KdeConfig,
    pub seed: u64,
    /// Replaces the default conservative constant `Var[Y]^2`.
    pub c_override: Option<f64>,
    /// Use the one-step form of psi_0 instead of the estimating-equation
    /// form.
    pub psi0_one_step: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            parameters: vec![ParameterId::PsiL, ParameterId::Psi2, ParameterId::Psi3],
            nuisance: NuisanceSpec::additive_default(),
            fold_count: 5,
            alpha: 0.05,
            screening_threshold: 0.5,
            kde: KdeConfig::default(),
            seed: 0,
            c_override: None,
            psi0_one_step: false,
        }
    }
}

/// Cache key for conditional-mean fits: whether `X` enters the features and
/// which `Z` columns do. psi_L and psi_1 share fits through this key, so a
/// screening step that keeps every column reproduces psi_L bit for bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct MuKey {
    with_x: bool,
    z_cols: Vec<usize>,
}

impl MuKey {
    fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        eat(self.with_x as u64);
        for &c in &self.z_cols {
            eat(c as u64 + 1);
        }
        h
    }
}

/// Out-of-fold fits and in-fold data for one evaluation fold, with lazy
/// caches so parameters sharing a nuisance fit it once.
pub struct FoldContext {
    pub fold_index: usize,
    pub train: Dataset,
    pub eval: Dataset,
    /// Report the one-step form of psi_0 instead of the
    /// estimating-equation form.
    pub psi0_one_step: bool,
    spec: NuisanceSpec,
    kde: KdeConfig,
    fold_seed: u64,
    screening_threshold: f64,
    mu_cache: RefCell<HashMap<MuKey, Rc<FittedRegressor>>>,
    nu: OnceCell<Rc<FittedRegressor>>,
    xx_fit: OnceCell<Rc<FittedRegressor>>,
    xy_fit: OnceCell<Rc<FittedRegressor>>,
    eval_moments: OnceCell<MomentSummary>,
    screening: OnceCell<ScreeningResult>,
    psi0: RefCell<Option<Rc<psi0::Psi0Machine>>>,
}

impl FoldContext {
    pub fn new(
        data: &Dataset,
        folds: &FoldAssignment,
        fold_index: usize,
        spec: &NuisanceSpec,
        kde: KdeConfig,
        screening_threshold: f64,
        seed: u64,
    ) -> Self {
        let eval_rows = folds.fold_rows(fold_index);
        let train_rows = folds.complement_rows(fold_index);
        FoldContext {
            fold_index,
            train: data.subset(&train_rows),
            eval: data.subset(&eval_rows),
            psi0_one_step: false,
            spec: spec.clone(),
            kde,
            fold_seed: rng::derive_seed(seed, "fold", fold_index as u64),
            screening_threshold,
            mu_cache: RefCell::new(HashMap::new()),
            nu: OnceCell::new(),
            xx_fit: OnceCell::new(),
            xy_fit: OnceCell::new(),
            eval_moments: OnceCell::new(),
            screening: OnceCell::new(),
            psi0: RefCell::new(None),
        }
    }

    /// Conditional mean of `Y` given the selected features, fit out of fold.
    /// `z_cols = 0..h` and `with_x = false` is the plain `mu(z)` fit.
    pub fn mu_fit(&self, with_x: bool, z_cols: &[usize]) -> Result<Rc<FittedRegressor>> {
        let key = MuKey { with_x, z_cols: z_cols.to_vec() };
        if let Some(hit) = self.mu_cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let features = self.features_for(&self.train, with_x, z_cols);
        let targets = DMatrix::from_column_slice(self.train.n(), 1, self.train.y.as_slice());
        let fit_seed = rng::derive_seed(self.fold_seed, "fit-mu", key.stable_hash());
        let fit = Rc::new(fit_regressor(&self.spec, &features, &targets, fit_seed)?);
        self.mu_cache.borrow_mut().insert(key, fit.clone());
        Ok(fit)
    }

    /// Feature matrix matching a `mu_fit` key, for either split.
    pub fn features_for(&self, data: &Dataset, with_x: bool, z_cols: &[usize]) -> DMatrix<f64> {
        let z = data.z.select_columns(z_cols.iter());
        if with_x {
            let n = data.n();
            let g = data.g();
            let mut m = DMatrix::zeros(n, g + z.ncols());
            m.view_mut((0, 0), (n, g)).copy_from(&data.x);
            m.view_mut((0, g), (n, z.ncols())).copy_from(&z);
            m
        } else {
            z
        }
    }

    pub fn all_z_cols(&self) -> Vec<usize> {
        (0..self.train.h()).collect()
    }

    /// `nu(z) = E[X | Z]`, one output per `X` coordinate, fit out of fold.
    pub fn nu_fit(&self) -> Result<Rc<FittedRegressor>> {
        if let Some(hit) = self.nu.get() {
            return Ok(hit.clone());
        }
        let fit_seed = rng::derive_seed(self.fold_seed, "fit-nu", 0);
        let fit = Rc::new(fit_regressor(&self.spec, &self.train.z, &self.train.x, fit_seed)?);
        let _ = self.nu.set(fit.clone());
        Ok(fit)
    }

    /// Regressions of the elementwise products `X_a X_b` (upper triangle)
    /// on `Z`, for the varying-coefficient conditional covariance.
    pub fn xx_products_fit(&self) -> Result<Rc<FittedRegressor>> {
        if let Some(hit) = self.xx_fit.get() {
            return Ok(hit.clone());
        }
        let g = self.train.g();
        let n = self.train.n();
        let pairs: Vec<(usize, usize)> =
            (0..g).flat_map(|a| (a..g).map(move |b| (a, b))).collect();
        let mut targets = DMatrix::zeros(n, pairs.len());
        for (k, &(a, b)) in pairs.iter().enumerate() {
            for i in 0..n {
                targets[(i, k)] = self.train.x[(i, a)] * self.train.x[(i, b)];
            }
        }
        let fit_seed = rng::derive_seed(self.fold_seed, "fit-xx", 0);
        let fit = Rc::new(fit_regressor(&self.spec, &self.train.z, &targets, fit_seed)?);
        let _ = self.xx_fit.set(fit.clone());
        Ok(fit)
    }

    /// Regressions of `X_a Y` on `Z`, for the conditional covariance with
    /// the response.
    pub fn xy_products_fit(&self) -> Result<Rc<FittedRegressor>> {
        if let Some(hit) = self.xy_fit.get() {
            return Ok(hit.clone());
        }
        let g = self.train.g();
        let n = self.train.n();
        let mut targets = DMatrix::zeros(n, g);
        for a in 0..g {
            for i in 0..n {
                targets[(i, a)] = self.train.x[(i, a)] * self.train.y[i];
            }
        }
        let fit_seed = rng::derive_seed(self.fold_seed, "fit-xy", 0);
        let fit = Rc::new(fit_regressor(&self.spec, &self.train.z, &targets, fit_seed)?);
        let _ = self.xy_fit.set(fit.clone());
        Ok(fit)
    }

    /// In-fold sample moments.
    pub fn eval_moments(&self) -> Result<&MomentSummary> {
        if self.eval_moments.get().is_none() {
            let m = data::summarize(&self.eval)?;
            let _ = self.eval_moments.set(m);
        }
        Ok(self.eval_moments.get().unwrap())
    }

    /// Correlation screening computed on the nuisance-training split only,
    /// so in-fold evaluation never sees selection noise.
    pub fn screening(&self) -> &ScreeningResult {
        self.screening
            .get_or_init(|| screen_covariates(&self.train, self.screening_threshold))
    }

    /// Kernel densities, Monte Carlo draws, and the `mu(x,z)` fit shared by
    /// psi_0 and rho_0.
    pub fn psi0_machine(&self) -> Result<Rc<psi0::Psi0Machine>> {
        if let Some(hit) = self.psi0.borrow().as_ref() {
            return Ok(hit.clone());
        }
        let mu_xz = self.mu_fit(true, &self.all_z_cols())?;
        let machine = Rc::new(psi0::Psi0Machine::build(
            &self.train,
            mu_xz,
            self.kde,
            self.fold_seed,
        )?);
        *self.psi0.borrow_mut() = Some(machine.clone());
        Ok(machine)
    }
}

/// Estimate one parameter on one fold.
pub fn fold_estimate(param: ParameterId, ctx: &FoldContext) -> Result<FoldEstimate> {
    let all_z = ctx.all_z_cols();
    let (value, diagnostics) = match param {
        ParameterId::PsiL => {
            let mu_z = ctx.mu_fit(false, &all_z)?;
            let mu_xz = ctx.mu_fit(true, &all_z)?;
            psi_l::psi_l_fold(ctx, &all_z, mu_z.as_ref(), mu_xz.as_ref())?
        }
        ParameterId::Psi1 => {
            let screening = ctx.screening().clone();
            let mu_v = ctx.mu_fit(false, &screening.kept)?;
            let mu_xv = ctx.mu_fit(true, &screening.kept)?;
            let (value, mut diag) =
                psi_l::psi_l_fold(ctx, &screening.kept, mu_v.as_ref(), mu_xv.as_ref())?;
            diag.screened_out = Some(screening.dropped.clone());
            diag.empty_screening_set = screening.kept.is_empty();
            (value, diag)
        }
        ParameterId::Psi0 => {
            let machine = ctx.psi0_machine()?;
            psi0::psi0_fold(ctx, machine.as_ref())?
        }
        ParameterId::Psi2 => {
            let nu = ctx.nu_fit()?;
            let mu_z = ctx.mu_fit(false, &all_z)?;
            partially_linear::psi2_fold(ctx, nu.as_ref(), mu_z.as_ref())?
        }
        ParameterId::Psi3 => {
            let nu = ctx.nu_fit()?;
            let mu_z = ctx.mu_fit(false, &all_z)?;
            interactions::psi3_fold(ctx, nu.as_ref(), mu_z.as_ref())?
        }
        ParameterId::Psi4 => {
            let nu = ctx.nu_fit()?;
            let mu_z = ctx.mu_fit(false, &all_z)?;
            let xx = ctx.xx_products_fit()?;
            let xy = ctx.xy_products_fit()?;
            varying_coefficient::psi4_fold(
                ctx,
                nu.as_ref(),
                mu_z.as_ref(),
                xx.as_ref(),
                xy.as_ref(),
            )?
        }
        ParameterId::Rho0 => {
            let machine = ctx.psi0_machine()?;
            rho0::rho0_fold(ctx, machine.as_ref())?
        }
        ParameterId::AuxDerivative | ParameterId::AuxGformula => {
            let nu = ctx.nu_fit()?;
            let mu_z = ctx.mu_fit(false, &all_z)?;
            let theta = interactions::theta_for_fold(ctx, nu.as_ref(), mu_z.as_ref())?;
            let aux = closed_form_auxiliaries(&theta, ctx.eval_moments()?);
            let value = match param {
                ParameterId::AuxDerivative => aux.derivative_interactions,
                _ => aux.gformula_variance_interactions,
            };
            let mut diag = FoldDiagnostics::default();
            diag.singular = theta.singular;
            diag.ridge_fallback = theta.ridge_fallback;
            (if theta.singular { f64::NAN } else { value }, diag)
        }
    };
    Ok(FoldEstimate {
        parameter_id: param,
        fold_index: ctx.fold_index,
        value: if diagnostics.singular { f64::NAN } else { value },
        n_fold: ctx.eval.n(),
        diagnostics,
    })
}

/// Cross-fitted per-fold estimates for every requested parameter.
pub fn cross_fit_folds(
    data: &Dataset,
    opts: &EstimateOptions,
) -> Result<Vec<FoldEstimate>> {
    let folds = data::make_folds(data.n(), opts.fold_count, opts.seed)?;
    let mut out = Vec::with_capacity(opts.fold_count * opts.parameters.len());
    for fold_index in 0..opts.fold_count {
        let mut ctx = FoldContext::new(
            data,
            &folds,
            fold_index,
            &opts.nuisance,
            opts.kde,
            opts.screening_threshold,
            opts.seed,
        );
        ctx.psi0_one_step = opts.psi0_one_step;
        for &param in &opts.parameters {
            out.push(fold_estimate(param, &ctx)?);
        }
    }
    Ok(out)
}

/// Full pipeline: cross-fit fold estimates, then pool each parameter into a
/// conservative t interval.
pub fn cross_fit(data: &Dataset, opts: &EstimateOptions) -> Result<Vec<EstimateResult>> {
    let c = match opts.c_override {
        Some(c) => c,
        None => inference::default_c(data)?,
    };
    let folds = cross_fit_folds(data, opts)?;
    let mut results = Vec::with_capacity(opts.parameters.len());
    for &param in &opts.parameters {
        let values: Vec<f64> = folds
            .iter()
            .filter(|f| f.parameter_id == param)
            .map(|f| f.value)
            .collect();
        results.push(inference::t_cross(
            param.as_str(),
            &values,
            c,
            data.n(),
            opts.alpha,
        )?);
    }
    Ok(results)
}

/// Nuisance in-fold root mean squared residual, for diagnostics.
pub(crate) fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let n = pred.nrows().max(1) as f64;
    ((pred - truth).norm_squared() / n).sqrt()
}

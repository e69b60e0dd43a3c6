//! Nuisance regressions: interchangeable estimator families for the
//! conditional means the importance estimators need (E[Y|Z], E[X|Z],
//! E[Y|X,Z], and conditional second moments).
//!
//! Three families are provided: ordinary least squares, penalized-spline
//! additive models, and random forests. Multi-output targets are always fit
//! as independent per-column regressions.

mod additive;
mod forest;
mod linear;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use additive::AdditiveFit;
pub use forest::ForestFit;
pub use linear::LinearFit;

/// Choice of regression family with its tuning parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum NuisanceSpec {
    Linear,
    Additive {
        #[serde(default = "default_knots")]
        knots_per_dim: usize,
        #[serde(default = "default_degree")]
        spline_degree: usize,
        /// Ridge penalties on second differences of the spline coefficients,
        /// selected by 2-fold cross-validation. A single entry pins the
        /// penalty without cross-validation.
        #[serde(default = "default_ridge_grid")]
        ridge_grid: Vec<f64>,
    },
    Forest {
        #[serde(default = "default_n_trees")]
        n_trees: usize,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
        #[serde(default = "default_mtry")]
        mtry_fraction: f64,
        #[serde(default = "default_bootstrap")]
        bootstrap: bool,
    },
}

fn default_knots() -> usize {
    10
}
fn default_degree() -> usize {
    3
}
fn default_ridge_grid() -> Vec<f64> {
    vec![1e-4, 1e-2, 1.0, 1e2, 1e4]
}
fn default_n_trees() -> usize {
    200
}
fn default_min_leaf() -> usize {
    5
}
fn default_mtry() -> f64 {
    1.0 / 3.0
}
fn default_bootstrap() -> bool {
    true
}

impl NuisanceSpec {
    pub fn additive_default() -> Self {
        NuisanceSpec::Additive {
            knots_per_dim: default_knots(),
            spline_degree: default_degree(),
            ridge_grid: default_ridge_grid(),
        }
    }

    pub fn forest_default() -> Self {
        NuisanceSpec::Forest {
            n_trees: default_n_trees(),
            min_leaf: default_min_leaf(),
            mtry_fraction: default_mtry(),
            bootstrap: default_bootstrap(),
        }
    }

    /// Parse a family name into its default-parameter spec.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(NuisanceSpec::Linear),
            "additive" => Ok(NuisanceSpec::additive_default()),
            "forest" => Ok(NuisanceSpec::forest_default()),
            other => Err(Error::InvalidConfig(format!(
                "unknown nuisance family {other:?} (expected linear, additive, or forest)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NuisanceSpec::Linear => "linear",
            NuisanceSpec::Additive { .. } => "additive",
            NuisanceSpec::Forest { .. } => "forest",
        }
    }
}

/// Anything that can produce row-wise predictions. Fitted regressors
/// implement this; tests inject closed-form oracles through it.
pub trait Predictor {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// A closure-backed predictor, mainly for oracle nuisances in tests.
pub struct FnPredictor<F: Fn(&DMatrix<f64>) -> DMatrix<f64>> {
    pub input_dim: usize,
    pub output_dim: usize,
    pub f: F,
}

impl<F: Fn(&DMatrix<f64>) -> DMatrix<f64>> Predictor for FnPredictor<F> {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn predict(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature columns", self.input_dim),
                got: format!("{}", features.ncols()),
            });
        }
        Ok((self.f)(features))
    }
}

#[derive(Debug, Clone)]
enum FitState {
    Linear(Vec<LinearFit>),
    Additive(Vec<AdditiveFit>),
    Forest(Vec<ForestFit>),
}

/// A fitted, immutable regression model. Prediction is deterministic given
/// the fitted state.
#[derive(Debug, Clone)]
pub struct FittedRegressor {
    pub spec: NuisanceSpec,
    pub input_dim: usize,
    pub output_dim: usize,
    /// A rank-deficient design was stabilized by ridge jitter somewhere in
    /// the fit.
    pub ridge_fallback: bool,
    state: FitState,
}

/// Fit a regressor of the given family. Multi-column targets are fit one
/// column at a time; column `k` of a multi-output fit is reproducible as a
/// single-output fit with seed `rng::derive_seed(seed, "forest-output", k)`.
pub fn fit_regressor(
    spec: &NuisanceSpec,
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    seed: u64,
) -> Result<FittedRegressor> {
    fit_regressor_weighted(spec, features, targets, None, seed)
}

/// [`fit_regressor`] with optional observation weights: weighted least
/// squares for the linear and additive families, weighted bootstrap
/// resampling for forests. Weights may be negative (quadratic-projection
/// balancing weights are not sign constrained); the forest resampler treats
/// negative weights as zero.
pub fn fit_regressor_weighted(
    spec: &NuisanceSpec,
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    weights: Option<&[f64]>,
    seed: u64,
) -> Result<FittedRegressor> {
    let n = features.nrows();
    let p = features.ncols();
    let q = targets.ncols();
    if targets.nrows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} target rows"),
            got: format!("{}", targets.nrows()),
        });
    }
    if q == 0 {
        return Err(Error::EmptySelection { role: "regression targets" });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} weights"),
                got: format!("{}", w.len()),
            });
        }
    }
    match spec {
        NuisanceSpec::Linear => {
            if n < p + 2 {
                return Err(Error::InsufficientData { needed: p + 2, got: n });
            }
        }
        NuisanceSpec::Forest { min_leaf, .. } => {
            if n < 2 * min_leaf {
                return Err(Error::InsufficientData { needed: 2 * min_leaf, got: n });
            }
        }
        NuisanceSpec::Additive { .. } => {
            if n < 4 {
                return Err(Error::InsufficientData { needed: 4, got: n });
            }
        }
    }

    let mut ridge_fallback = false;
    let col_seed = |k: usize| {
        if q == 1 {
            seed
        } else {
            rng::derive_seed(seed, "forest-output", k as u64)
        }
    };
    let state = match spec {
        NuisanceSpec::Linear => {
            let mut fits = Vec::with_capacity(q);
            for k in 0..q {
                let fit = linear::fit(features, &targets.column(k).into_owned(), weights)?;
                ridge_fallback |= fit.ridge_fallback;
                fits.push(fit);
            }
            FitState::Linear(fits)
        }
        NuisanceSpec::Additive { knots_per_dim, spline_degree, ridge_grid } => {
            let mut fits = Vec::with_capacity(q);
            for k in 0..q {
                let fit = additive::fit(
                    features,
                    &targets.column(k).into_owned(),
                    weights,
                    *knots_per_dim,
                    *spline_degree,
                    ridge_grid,
                    col_seed(k),
                )?;
                ridge_fallback |= fit.ridge_fallback;
                fits.push(fit);
            }
            FitState::Additive(fits)
        }
        NuisanceSpec::Forest { n_trees, min_leaf, mtry_fraction, bootstrap } => {
            let mut fits = Vec::with_capacity(q);
            for k in 0..q {
                fits.push(forest::fit(
                    features,
                    &targets.column(k).into_owned(),
                    weights,
                    *n_trees,
                    *min_leaf,
                    *mtry_fraction,
                    *bootstrap,
                    col_seed(k),
                )?);
            }
            FitState::Forest(fits)
        }
    };
    Ok(FittedRegressor {
        spec: spec.clone(),
        input_dim: p,
        output_dim: q,
        ridge_fallback,
        state,
    })
}

impl Predictor for FittedRegressor {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn predict(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature columns", self.input_dim),
                got: format!("{} columns", features.ncols()),
            });
        }
        let m = features.nrows();
        let mut out = DMatrix::zeros(m, self.output_dim);
        match &self.state {
            FitState::Linear(fits) => {
                for (k, fit) in fits.iter().enumerate() {
                    out.set_column(k, &fit.predict(features));
                }
            }
            FitState::Additive(fits) => {
                for (k, fit) in fits.iter().enumerate() {
                    out.set_column(k, &fit.predict(features));
                }
            }
            FitState::Forest(fits) => {
                for (k, fit) in fits.iter().enumerate() {
                    out.set_column(k, &fit.predict(features));
                }
            }
        }
        Ok(out)
    }
}

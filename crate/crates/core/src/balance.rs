//! Covariate-balancing weights: an alternative decorrelation route.
//!
//! For separable moment functions `h_j(x,z) = f_j(x) g_j(z)`, the weighted
//! sample moment of `h_j` should match the product of marginal means under
//! an independent (X, Z). Among all weight vectors meeting those `k`
//! constraints exactly, the quadratic projection picks the one closest to
//! uniform:
//!
//! ```text
//! minimize ||W - 1||^2   s.t.   (1/n) sum_i W_i h_j(X_i, Z_i) = mu_hat_j
//! W_hat = 1 - H lambda_hat,   lambda_hat = (H^T H / n)^{-1} (h_bar - mu_hat)
//! ```
//!
//! The first basis function is the constant pair, which makes
//! `mean(W) = 1` one of the constraints. Weights may be negative; LOCO is
//! then re-estimated with weighted nuisance fits and weighted residual
//! averages.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, orthogonal_basis, solve_sym_vec, Dataset};
use crate::error::{Error, Result};
use crate::estimators::psi_l_value;
use crate::inference::{self, EstimateResult};
use crate::nuisance::{fit_regressor_weighted, NuisanceSpec, Predictor};
use crate::rng;

/// A polynomial feature of one column: evaluates one orthogonalized (or
/// raw) power of the column value. Orthogonal features store the
/// Gram-Schmidt expansion over centered monomials from the sample that
/// built them, so they evaluate on new rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyFeature {
    /// Coefficients over the centered monomials `v^1 - m_1, ..., v^d - m_d`.
    pub coeffs: Vec<f64>,
    /// Means of the raw monomials on the construction sample.
    pub monomial_means: Vec<f64>,
}

impl PolyFeature {
    /// Raw power `v^degree`.
    pub fn raw_power(degree: usize) -> Self {
        let mut coeffs = vec![0.0; degree];
        coeffs[degree - 1] = 1.0;
        PolyFeature { coeffs, monomial_means: vec![0.0; degree] }
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.monomial_means)
            .enumerate()
            .map(|(d, (c, m))| c * (v.powi(d as i32 + 1) - m))
            .sum()
    }
}

/// One separable basis function `h(x, z) = f(x) g(z)`. `None` on either
/// side means the constant function 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisTerm {
    pub x_part: Option<(usize, PolyFeature)>,
    pub z_part: Option<(usize, PolyFeature)>,
}

impl BasisTerm {
    pub fn constant() -> Self {
        BasisTerm { x_part: None, z_part: None }
    }

    pub fn eval_x(&self, data: &Dataset, i: usize) -> f64 {
        self.x_part.as_ref().map_or(1.0, |(col, f)| f.eval(data.x[(i, *col)]))
    }

    pub fn eval_z(&self, data: &Dataset, i: usize) -> f64 {
        self.z_part.as_ref().map_or(1.0, |(col, f)| f.eval(data.z[(i, *col)]))
    }
}

/// A set of separable moment functions; the first is always the constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentBasis {
    pub terms: Vec<BasisTerm>,
}

impl MomentBasis {
    /// Just the constant: no constraints beyond mean-one weights.
    pub fn constant_only() -> Self {
        MomentBasis { terms: vec![BasisTerm::constant()] }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Default basis: the constant plus pairwise products of orthogonal
    /// polynomials of each X column (degree <= `x_degree`) with raw powers
    /// of each Z column (degree <= `z_degree`), capped at `max_terms`.
    pub fn default_products(
        data: &Dataset,
        x_degree: usize,
        z_degree: usize,
        max_terms: usize,
    ) -> Result<Self> {
        let mut terms = vec![BasisTerm::constant()];
        'outer: for x_col in 0..data.g() {
            let basis = orthogonal_basis(&data.x.column(x_col).into_owned(), x_degree)?;
            // recover the Gram-Schmidt expansion per degree by solving on
            // the construction sample: store coefficients directly
            let feats = gram_schmidt_features(&data.x.column(x_col).into_owned(), x_degree)?;
            let _ = basis;
            for f in feats {
                for z_col in 0..data.h() {
                    for zd in 1..=z_degree {
                        if terms.len() >= max_terms {
                            break 'outer;
                        }
                        terms.push(BasisTerm {
                            x_part: Some((x_col, f.clone())),
                            z_part: Some((z_col, PolyFeature::raw_power(zd))),
                        });
                    }
                }
            }
        }
        Ok(MomentBasis { terms })
    }
}

/// Orthonormal polynomial features of a single column as explicit
/// monomial-space coefficients, so they can be evaluated on new rows.
fn gram_schmidt_features(values: &DVector<f64>, degree: usize) -> Result<Vec<PolyFeature>> {
    let n = values.len();
    if n <= degree {
        return Err(Error::InsufficientData { needed: degree + 1, got: n });
    }
    let nf = n as f64;
    let monomial_means: Vec<f64> =
        (1..=degree).map(|d| values.iter().map(|v| v.powi(d as i32)).sum::<f64>() / nf).collect();
    let mut feats: Vec<PolyFeature> = Vec::with_capacity(degree);
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(degree);
    for d in 1..=degree {
        let mut coeffs = vec![0.0; degree];
        coeffs[d - 1] = 1.0;
        let mut col = DVector::from_iterator(
            n,
            values.iter().map(|v| v.powi(d as i32) - monomial_means[d - 1]),
        );
        let raw_scale = (col.norm_squared() / nf).sqrt();
        for (prev_f, prev_c) in feats.iter().zip(&cols) {
            let proj = col.dot(prev_c) / nf;
            for (c, pc) in coeffs.iter_mut().zip(&prev_f.coeffs) {
                *c -= proj * pc;
            }
            col -= prev_c * proj;
        }
        let norm = (col.norm_squared() / nf).sqrt();
        if norm <= 1e-10 * raw_scale.max(1e-300) || norm == 0.0 {
            return Err(Error::DegenerateBasis);
        }
        for c in &mut coeffs {
            *c /= norm;
        }
        col /= norm;
        feats.push(PolyFeature { coeffs, monomial_means: monomial_means.clone() });
        cols.push(col);
    }
    Ok(feats)
}

/// Balancing weights with the solver state needed to weight new rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub weights: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `|(1/n) sum_i W_i h_j - mu_hat_j|` per constraint.
    pub constraint_residuals: Vec<f64>,
    pub basis: MomentBasis,
    pub ridge_fallback: bool,
}

impl BalanceWeights {
    /// Weight formula `1 - h(x,z)^T lambda` evaluated on new rows with the
    /// fitted `lambda` (the convention for out-of-fold rows).
    pub fn weights_for(&self, data: &Dataset) -> Vec<f64> {
        (0..data.n())
            .map(|i| {
                let mut w = 1.0;
                for (term, lam) in self.basis.terms.iter().zip(&self.lambda) {
                    w -= term.eval_x(data, i) * term.eval_z(data, i) * lam;
                }
                w
            })
            .collect()
    }

    pub fn negative_fraction(&self) -> f64 {
        self.weights.iter().filter(|w| **w < 0.0).count() as f64 / self.weights.len() as f64
    }

    /// Export as CSV with a `weight` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("{i},{w}\n"));
        }
        out
    }
}

/// Solve the quadratic projection for the balancing weights.
pub fn solve_balance_weights(data: &Dataset, basis: &MomentBasis) -> Result<BalanceWeights> {
    if basis.is_empty() {
        return Err(Error::InvalidConfig("moment basis must not be empty".into()));
    }
    let n = data.n();
    let k = basis.len();
    let nf = n as f64;
    // H_{ij} = h_j(X_i, Z_i); target mu_hat_j = mean f_j * mean g_j
    let mut h = DMatrix::zeros(n, k);
    let mut mu_hat = DVector::zeros(k);
    let mut h_bar = DVector::zeros(k);
    for (j, term) in basis.terms.iter().enumerate() {
        let mut fx_mean = 0.0;
        let mut gz_mean = 0.0;
        for i in 0..n {
            let fx = term.eval_x(data, i);
            let gz = term.eval_z(data, i);
            h[(i, j)] = fx * gz;
            fx_mean += fx;
            gz_mean += gz;
            h_bar[j] += fx * gz;
        }
        mu_hat[j] = (fx_mean / nf) * (gz_mean / nf);
        h_bar[j] /= nf;
    }
    let gram = h.transpose() * &h / nf;
    let (lambda, diag) = solve_sym_vec(&gram, &(h_bar.clone() - &mu_hat));
    if diag.singular {
        return Err(Error::Singular {
            context: format!(
                "balancing normal equations (condition estimate {:.3e})",
                diag.cond
            ),
        });
    }
    let weights_vec = DVector::from_element(n, 1.0) - &h * &lambda;
    let mut residuals = Vec::with_capacity(k);
    for j in 0..k {
        let achieved = h.column(j).dot(&weights_vec) / nf;
        residuals.push((achieved - mu_hat[j]).abs());
    }
    Ok(BalanceWeights {
        weights: weights_vec.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        constraint_residuals: residuals,
        basis: basis.clone(),
        ridge_fallback: diag.ridge_fallback,
    })
}

/// Cross-fitted LOCO with balancing weights: weights are solved on the
/// nuisance-training split, nuisances are fit with those weights, and
/// in-fold rows are weighted by the same `lambda` formula.
pub fn weighted_psi_l(
    data: &Dataset,
    spec: &NuisanceSpec,
    basis_degrees: (usize, usize),
    fold_count: usize,
    alpha: f64,
    c_override: Option<f64>,
    seed: u64,
) -> Result<(EstimateResult, Vec<f64>)> {
    let folds = make_folds(data.n(), fold_count, seed)?;
    let mut fold_values = Vec::with_capacity(fold_count);
    let mut negative_fractions = Vec::with_capacity(fold_count);
    for j in 0..fold_count {
        let train = data.subset(&folds.complement_rows(j));
        let eval = data.subset(&folds.fold_rows(j));
        let basis =
            MomentBasis::default_products(&train, basis_degrees.0, basis_degrees.1, 25)?;
        let bw = solve_balance_weights(&train, &basis)?;
        negative_fractions.push(bw.negative_fraction());
        let fit_seed = rng::derive_seed(seed, "weighted-fold", j as u64);
        let targets = DMatrix::from_column_slice(train.n(), 1, train.y.as_slice());
        let mu_z =
            fit_regressor_weighted(spec, &train.z, &targets, Some(&bw.weights), fit_seed)?;
        let mu_xz = fit_regressor_weighted(
            spec,
            &train.xz(),
            &targets,
            Some(&bw.weights),
            rng::derive_seed(seed, "weighted-fold-xz", j as u64),
        )?;
        let eval_w = bw.weights_for(&eval);
        let pred_z = mu_z.predict(&eval.z)?;
        let pred_xz = mu_xz.predict(&eval.xz())?;
        // weighted residual averages
        let mut without_x = 0.0;
        let mut with_x = 0.0;
        let mut total_w = 0.0;
        for i in 0..eval.n() {
            let w = eval_w[i];
            without_x += w * (eval.y[i] - pred_z[(i, 0)]).powi(2);
            with_x += w * (eval.y[i] - pred_xz[(i, 0)]).powi(2);
            total_w += w;
        }
        let value = if total_w.abs() > 1e-12 {
            (without_x - with_x) / total_w
        } else {
            f64::NAN
        };
        fold_values.push(value);
    }
    let c = match c_override {
        Some(c) => c,
        None => inference::default_c(data)?,
    };
    let result = inference::t_cross("psi_L", &fold_values, c, data.n(), alpha)?;
    Ok((result, negative_fractions))
}

/// Unweighted LOCO on the same folds, for comparison in the weighted path.
pub fn unweighted_psi_l_reference(
    data: &Dataset,
    spec: &NuisanceSpec,
    fold_count: usize,
    alpha: f64,
    seed: u64,
) -> Result<EstimateResult> {
    let folds = make_folds(data.n(), fold_count, seed)?;
    let mut fold_values = Vec::with_capacity(fold_count);
    for j in 0..fold_count {
        let train = data.subset(&folds.complement_rows(j));
        let eval = data.subset(&folds.fold_rows(j));
        let fit_seed = rng::derive_seed(seed, "weighted-fold", j as u64);
        let targets = DMatrix::from_column_slice(train.n(), 1, train.y.as_slice());
        let mu_z = fit_regressor_weighted(spec, &train.z, &targets, None, fit_seed)?;
        let mu_xz = fit_regressor_weighted(
            spec,
            &train.xz(),
            &targets,
            None,
            rng::derive_seed(seed, "weighted-fold-xz", j as u64),
        )?;
        let pred_z = mu_z.predict(&eval.z)?;
        let pred_xz = mu_xz.predict(&eval.xz())?;
        fold_values.push(psi_l_value(&eval.y, &pred_z, &pred_xz));
    }
    inference::t_cross("psi_L", &fold_values, inference::default_c(data)?, data.n(), alpha)
}

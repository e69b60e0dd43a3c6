//! Ordinary (optionally weighted) least squares with an intercept.

use nalgebra::{DMatrix, DVector};

use crate::data::solve_sym_vec;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub intercept: f64,
    pub coef: DVector<f64>,
    pub ridge_fallback: bool,
}

pub(super) fn fit(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    weights: Option<&[f64]>,
) -> Result<LinearFit> {
    let n = features.nrows();
    let p = features.ncols();
    let d = p + 1;
    let mut gram = DMatrix::zeros(d, d);
    let mut xty = DVector::zeros(d);
    let mut row = vec![0.0f64; d];
    for i in 0..n {
        row[0] = 1.0;
        for j in 0..p {
            row[j + 1] = features[(i, j)];
        }
        let w = weights.map_or(1.0, |w| w[i]);
        for a in 0..d {
            let wa = w * row[a];
            for b in a..d {
                gram[(a, b)] += wa * row[b];
            }
            xty[a] += wa * target[i];
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let (beta, diag) = solve_sym_vec(&gram, &xty);
    Ok(LinearFit {
        intercept: beta[0],
        coef: beta.rows(1, p).into_owned(),
        ridge_fallback: diag.ridge_fallback || diag.singular,
    })
}

impl LinearFit {
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        let mut out = features * &self.coef;
        out.add_scalar_mut(self.intercept);
        out
    }
}

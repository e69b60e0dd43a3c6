//! Additive model: a sum of per-coordinate cubic B-spline smooths, fit by
//! penalized least squares.
//!
//! Each coordinate gets a clamped B-spline basis with interior knots at
//! sample quantiles. The penalty is a ridge on second differences of each
//! block's coefficients, with the penalty weight chosen from a fixed grid by
//! 2-fold cross-validation. Queries are clamped to the training range, so
//! extrapolation is constant.

use nalgebra::{DMatrix, DVector};

use crate::data::solve_sym_vec;
use crate::error::Result;
use crate::rng;

/// Clamped B-spline basis for one coordinate.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    knots: Vec<f64>,
    degree: usize,
    lo: f64,
    hi: f64,
}

impl SplineBasis {
    /// Build from training values with `knot_count` interior knots at
    /// quantiles. Returns `None` when the coordinate is constant (the term
    /// is then dropped and absorbed by the intercept).
    fn from_values(values: &[f64], knot_count: usize, degree: usize) -> Option<Self> {
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return None;
        }
        let mut knots = Vec::with_capacity(knot_count + 2 * (degree + 1));
        for _ in 0..=degree {
            knots.push(lo);
        }
        let n = sorted.len();
        for k in 1..=knot_count {
            let q = k as f64 / (knot_count + 1) as f64;
            let idx = ((n - 1) as f64 * q).round() as usize;
            let v = sorted[idx];
            if v > *knots.last().unwrap() && v < hi {
                knots.push(v);
            }
        }
        for _ in 0..=degree {
            knots.push(hi);
        }
        Some(SplineBasis { knots, degree, lo, hi })
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Evaluate all basis functions at `x` into `out` (length `len()`).
    fn eval_into(&self, x: f64, out: &mut [f64]) {
        out.fill(0.0);
        let d = self.degree;
        let t = &self.knots;
        let x = x.clamp(self.lo, self.hi);
        // span index k: t[k] <= x < t[k+1], clamped so the last interval is closed
        let last = t.len() - d - 2;
        let mut k = match t[d..=last].partition_point(|&v| v <= x) {
            0 => d,
            pos => d + pos - 1,
        };
        k = k.min(last);
        // triangular recurrence for the d+1 nonzero functions at span k
        let mut vals = vec![0.0f64; d + 1];
        vals[0] = 1.0;
        for r in 1..=d {
            let mut saved = 0.0;
            for j in 0..r {
                let left = t[k + 1 + j - r];
                let right = t[k + 1 + j];
                let denom = right - left;
                let term = if denom > 0.0 { vals[j] / denom } else { 0.0 };
                vals[j] = saved + (right - x) * term;
                saved = (x - left) * term;
            }
            vals[r] = saved;
        }
        for (j, v) in vals.iter().enumerate() {
            out[k - d + j] = *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdditiveFit {
    bases: Vec<Option<SplineBasis>>,
    /// Intercept followed by the concatenated block coefficients.
    coef: DVector<f64>,
    pub chosen_penalty: f64,
    pub ridge_fallback: bool,
}

fn design_row(bases: &[Option<SplineBasis>], features: &DMatrix<f64>, i: usize, row: &mut [f64]) {
    row[0] = 1.0;
    let mut offset = 1;
    for (j, basis) in bases.iter().enumerate() {
        if let Some(b) = basis {
            let m = b.len();
            b.eval_into(features[(i, j)], &mut row[offset..offset + m]);
            offset += m;
        }
    }
}

fn build_design(bases: &[Option<SplineBasis>], features: &DMatrix<f64>) -> DMatrix<f64> {
    let width = 1 + bases.iter().flatten().map(|b| b.len()).sum::<usize>();
    let n = features.nrows();
    let mut design = DMatrix::zeros(n, width);
    let mut row = vec![0.0f64; width];
    for i in 0..n {
        design_row(bases, features, i, &mut row);
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    design
}

/// Second-difference penalty, block diagonal over coordinate blocks, zero on
/// the intercept.
fn penalty_matrix(bases: &[Option<SplineBasis>], width: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(width, width);
    let mut offset = 1;
    for basis in bases.iter().flatten() {
        let m = basis.len();
        for r in 0..m.saturating_sub(2) {
            // row of D2: (1, -2, 1) at positions r, r+1, r+2
            let idx = [offset + r, offset + r + 1, offset + r + 2];
            let w = [1.0, -2.0, 1.0];
            for a in 0..3 {
                for b in 0..3 {
                    p[(idx[a], idx[b])] += w[a] * w[b];
                }
            }
        }
        offset += m;
    }
    p
}

fn solve_penalized(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    weights: Option<&[f64]>,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> (DVector<f64>, bool) {
    let width = design.ncols();
    let mut gram = match weights {
        None => design.transpose() * design,
        Some(w) => {
            let mut weighted = design.clone();
            for i in 0..design.nrows() {
                weighted.row_mut(i).scale_mut(w[i]);
            }
            design.transpose() * weighted
        }
    };
    gram += penalty * lambda;
    // small ridge for identifiability: each block's constant direction
    // aliases the intercept and is unpenalized by second differences
    for i in 0..width {
        gram[(i, i)] += 1e-8;
    }
    let xty = match weights {
        None => design.transpose() * target,
        Some(w) => {
            let weighted = DVector::from_iterator(
                target.len(),
                target.iter().enumerate().map(|(i, v)| v * w[i]),
            );
            design.transpose() * weighted
        }
    };
    let (coef, diag) = solve_sym_vec(&gram, &xty);
    (coef, diag.ridge_fallback || diag.singular)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn fit(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    weights: Option<&[f64]>,
    knots_per_dim: usize,
    spline_degree: usize,
    ridge_grid: &[f64],
    seed: u64,
) -> Result<AdditiveFit> {
    let n = features.nrows();
    let bases: Vec<Option<SplineBasis>> = (0..features.ncols())
        .map(|j| {
            SplineBasis::from_values(
                features.column(j).as_slice(),
                knots_per_dim,
                spline_degree,
            )
        })
        .collect();
    let design = build_design(&bases, features);
    let penalty = penalty_matrix(&bases, design.ncols());

    let chosen = if ridge_grid.len() <= 1 {
        ridge_grid.first().copied().unwrap_or(0.0)
    } else {
        // 2-fold cross-validation on a seeded shuffle
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(seed, "additive-cv", 0);
        for i in (1..n).rev() {
            use rand::Rng;
            order.swap(i, r.random_range(0..=i));
        }
        let halves = [&order[..n / 2], &order[n / 2..]];
        let mut best = (f64::INFINITY, ridge_grid[0]);
        for &lambda in ridge_grid {
            let mut sse = 0.0;
            for split in 0..2 {
                let train = halves[split];
                let valid = halves[1 - split];
                let train_design = design.select_rows(train.iter());
                let train_y = DVector::from_iterator(train.len(), train.iter().map(|&i| target[i]));
                let train_w: Option<Vec<f64>> =
                    weights.map(|w| train.iter().map(|&i| w[i]).collect());
                let (coef, _) = solve_penalized(
                    &train_design,
                    &train_y,
                    train_w.as_deref(),
                    &penalty,
                    lambda,
                );
                for &i in valid {
                    let pred = design.row(i).transpose().dot(&coef);
                    let w = weights.map_or(1.0, |w| w[i].max(0.0));
                    sse += w * (pred - target[i]).powi(2);
                }
            }
            if sse < best.0 {
                best = (sse, lambda);
            }
        }
        best.1
    };

    let (coef, ridge_fallback) = solve_penalized(&design, target, weights, &penalty, chosen);
    Ok(AdditiveFit { bases, coef, chosen_penalty: chosen, ridge_fallback })
}

impl AdditiveFit {
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        let width = self.coef.len();
        let mut out = DVector::zeros(features.nrows());
        let mut row = vec![0.0f64; width];
        for i in 0..features.nrows() {
            design_row(&self.bases, features, i, &mut row);
            out[i] = row.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_partition_of_unity() {
        let values: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let basis = SplineBasis::from_values(&values, 10, 3).unwrap();
        let mut out = vec![0.0; basis.len()];
        for x in [0.0, 0.05, 3.3, 7.77, 9.9, 12.0, -4.0] {
            basis.eval_into(x, &mut out);
            let total: f64 = out.iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "x={x} sum={total}");
            assert!(out.iter().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn constant_coordinate_dropped() {
        let basis = SplineBasis::from_values(&[2.0, 2.0, 2.0], 5, 3);
        assert!(basis.is_none());
    }
}

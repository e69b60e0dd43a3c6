//! Numeric table handling, moment summaries, basis expansion, interaction
//! features, fold assignment, and the small dense linear algebra the
//! estimators share.
//!
//! A [`Dataset`] is a column partition of a numeric table into the covariate
//! block of interest `X` (n×g), the remaining covariates `Z` (n×h, possibly
//! h = 0), and the response `Y`. All values must be finite; this is enforced
//! at construction and at CSV load.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Column-partitioned numeric table: `X` block, `Z` block, response `Y`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub y_name: String,
}

impl Dataset {
    /// Build a dataset, checking row counts and finiteness.
    pub fn new(
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        y: DVector<f64>,
        x_names: Vec<String>,
        z_names: Vec<String>,
        y_name: String,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if z.nrows() != n || y.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} rows in every block"),
                got: format!("x: {}, z: {}, y: {}", n, z.nrows(), y.len()),
            });
        }
        if x.ncols() == 0 {
            return Err(Error::EmptySelection { role: "x block" });
        }
        for (block, names) in [(&x, &x_names), (&z, &z_names)] {
            for (j, name) in names.iter().enumerate() {
                for i in 0..n {
                    if !block[(i, j)].is_finite() {
                        return Err(Error::BadCell {
                            row: i,
                            column: name.clone(),
                            value: block[(i, j)].to_string(),
                        });
                    }
                }
            }
        }
        if let Some(i) = (0..n).find(|&i| !y[i].is_finite()) {
            return Err(Error::BadCell {
                row: i,
                column: y_name.clone(),
                value: y[i].to_string(),
            });
        }
        Ok(Self { x, z, y, x_names, z_names, y_name })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Width of the `X` block.
    pub fn g(&self) -> usize {
        self.x.ncols()
    }

    /// Width of the `Z` block.
    pub fn h(&self) -> usize {
        self.z.ncols()
    }

    /// Row subset, preserving order of `rows`.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows.iter()),
            z: self.z.select_rows(rows.iter()),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
            y_name: self.y_name.clone(),
        }
    }

    /// Same rows, `Z` restricted to the given columns (screening).
    pub fn with_z_columns(&self, cols: &[usize]) -> Dataset {
        Dataset {
            x: self.x.clone(),
            z: self.z.select_columns(cols.iter()),
            y: self.y.clone(),
            x_names: self.x_names.clone(),
            z_names: cols.iter().map(|&j| self.z_names[j].clone()).collect(),
            y_name: self.y_name.clone(),
        }
    }

    /// `[X | Z]` feature matrix for fitting E[Y | X, Z].
    pub fn xz(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, self.g() + self.h());
        m.view_mut((0, 0), (n, self.g())).copy_from(&self.x);
        m.view_mut((0, self.g()), (n, self.h())).copy_from(&self.z);
        m
    }
}

/// First and second sample moments of a dataset (denominator `n`).
#[derive(Debug, Clone)]
pub struct MomentSummary {
    pub m_x: DVector<f64>,
    pub sigma_x: DMatrix<f64>,
    pub m_z: DVector<f64>,
    pub sigma_z: DMatrix<f64>,
    /// `gamma = sigma_z + m_z m_z^T`, the raw second moment of `Z`.
    pub gamma: DMatrix<f64>,
    pub var_y: f64,
}

/// Deterministic balanced assignment of rows to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of_row: Vec<usize>,
    pub fold_count: usize,
}

impl FoldAssignment {
    /// Rows belonging to fold `j`.
    pub fn fold_rows(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] == j).collect()
    }

    /// Rows outside fold `j` (nuisance-training split).
    pub fn complement_rows(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] != j).collect()
    }
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

/// Expand a comma-separated selector, allowing `name<int>..name<int>` ranges
/// (e.g. `z1..z5`).
pub fn expand_selector(selector: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for part in selector.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if let Some((lo, hi)) = part.split_once("..") {
            let split_at = |s: &str| -> Option<(String, u64)> {
                let idx = s.find(|c: char| c.is_ascii_digit())?;
                let (prefix, digits) = s.split_at(idx);
                digits.parse::<u64>().ok().map(|d| (prefix.to_string(), d))
            };
            match (split_at(lo), split_at(hi)) {
                (Some((pa, a)), Some((pb, b))) if pa == pb && a <= b => {
                    for i in a..=b {
                        out.push(format!("{pa}{i}"));
                    }
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "bad column range {part:?}: expected like z1..z5"
                    )))
                }
            }
        } else {
            out.push(part.to_string());
        }
    }
    Ok(out)
}

/// Load a CSV file (header row, comma separated) and partition its columns.
pub fn load_csv(path: &str, x_cols: &str, z_cols: &str, y_col: &str) -> Result<Dataset> {
    let x_names = expand_selector(x_cols)?;
    let z_names = expand_selector(z_cols)?;
    let y_names = expand_selector(y_col)?;
    if x_names.is_empty() {
        return Err(Error::EmptySelection { role: "x columns" });
    }
    if y_names.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "exactly one y column expected, got {:?}",
            y_names
        )));
    }
    let y_name = y_names.into_iter().next().unwrap();

    let mut seen = std::collections::HashSet::new();
    for name in x_names.iter().chain(z_names.iter()).chain(std::iter::once(&y_name)) {
        if !seen.insert(name.clone()) {
            return Err(Error::OverlappingSelectors { name: name.clone() });
        }
    }

    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => Error::Csv(e.to_string()),
    })?;
    let header: Vec<String> =
        reader.headers().map_err(|e| Error::Csv(e.to_string()))?.iter().map(String::from).collect();

    let find = |name: &String| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { name: name.clone() })
    };
    let x_idx: Vec<usize> = x_names.iter().map(find).collect::<Result<_>>()?;
    let z_idx: Vec<usize> = z_names.iter().map(find).collect::<Result<_>>()?;
    let y_idx = find(&y_name)?;

    let mut x_rows: Vec<f64> = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut y_vals: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let parse = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::BadCell {
                    row,
                    column: name.to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        for (&col, name) in x_idx.iter().zip(&x_names) {
            x_rows.push(parse(col, name)?);
        }
        for (&col, name) in z_idx.iter().zip(&z_names) {
            z_rows.push(parse(col, name)?);
        }
        y_vals.push(parse(y_idx, &y_name)?);
    }
    let n = y_vals.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let x = DMatrix::from_row_iterator(n, x_idx.len(), x_rows);
    let z = DMatrix::from_row_iterator(n, z_idx.len(), z_rows);
    Dataset::new(x, z, DVector::from_vec(y_vals), x_names, z_names, y_name)
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

/// Column means of a matrix.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Sample covariance with denominator `n`.
pub fn covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let means = column_means(m);
    let mut centered = m.clone();
    for j in 0..m.ncols() {
        centered.column_mut(j).add_scalar_mut(-means[j]);
    }
    centered.transpose() * &centered / n
}

/// Sample means, covariances, raw `Z` second moment, and Var[Y].
pub fn summarize(data: &Dataset) -> Result<MomentSummary> {
    if data.n() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: data.n() });
    }
    let m_x = column_means(&data.x);
    let sigma_x = covariance(&data.x);
    let m_z = column_means(&data.z);
    let sigma_z = covariance(&data.z);
    let gamma = &sigma_z + &m_z * m_z.transpose();
    let y_mean = data.y.mean();
    let var_y = data.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / data.n() as f64;
    Ok(MomentSummary { m_x, sigma_x, m_z, sigma_z, gamma, var_y })
}

// ---------------------------------------------------------------------------
// Orthogonal polynomial basis
// ---------------------------------------------------------------------------

/// Data-driven orthogonal polynomial expansion of a single column.
///
/// Gram–Schmidt on the centered monomials `v, v^2, ..., v^k` in the sample
/// inner product `<a,b> = (1/n) Σ a_i b_i`. Columns are mean zero, mutually
/// orthogonal, and have unit sample norm, so `B^T B / n = I_k`.
pub fn orthogonal_basis(values: &DVector<f64>, degree: usize) -> Result<DMatrix<f64>> {
    let n = values.len();
    if degree == 0 {
        return Err(Error::InvalidConfig("basis degree must be >= 1".into()));
    }
    if n <= degree {
        return Err(Error::InsufficientData { needed: degree + 1, got: n });
    }
    let nf = n as f64;
    let mut basis = DMatrix::zeros(n, degree);
    for j in 0..degree {
        let mut col = DVector::from_iterator(n, values.iter().map(|v| v.powi(j as i32 + 1)));
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let raw_scale = (col.norm_squared() / nf).sqrt();
        for prev in 0..j {
            let p = basis.column(prev);
            let proj = col.dot(&p) / nf;
            col -= p * proj;
        }
        let norm = (col.norm_squared() / nf).sqrt();
        if norm <= 1e-10 * raw_scale.max(1e-300) || norm == 0.0 {
            return Err(Error::DegenerateBasis);
        }
        basis.set_column(j, &(col / norm));
    }
    Ok(basis)
}

// ---------------------------------------------------------------------------
// Interaction features and Kronecker products
// ---------------------------------------------------------------------------

/// `vec(x ztilde^T)` with `ztilde = (1, z)`; equivalently `ztilde ⊗ x`,
/// the `x` index moving fastest.
pub fn interaction_features(x_row: &DVector<f64>, z_row: &DVector<f64>) -> DVector<f64> {
    let g = x_row.len();
    let h = z_row.len();
    let mut out = DVector::zeros(g * (h + 1));
    for j in 0..g {
        out[j] = x_row[j];
    }
    for k in 0..h {
        for j in 0..g {
            out[(k + 1) * g + j] = z_row[k] * x_row[j];
        }
    }
    out
}

/// Standard Kronecker product `a ⊗ b`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    let mut out = DMatrix::zeros(p * r, q * s);
    for i in 0..p {
        for j in 0..q {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..r {
                for l in 0..s {
                    out[(i * r + k, j * s + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Fold assignment
// ---------------------------------------------------------------------------

/// Random balanced partition of `0..n` into `fold_count` folds, reproducible
/// per seed. Fold sizes differ by at most one.
pub fn make_folds(n: usize, fold_count: usize, seed: u64) -> Result<FoldAssignment> {
    if fold_count < 2 || fold_count > n {
        return Err(Error::BadFoldRequest { n, fold_count });
    }
    // Dedicated stream so estimation seeds and fold seeds stay independent.
    let mut rng = rng::stream(seed, "fold-assignment", 0);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut fold_of_row = vec![0usize; n];
    for (pos, &row) in perm.iter().enumerate() {
        fold_of_row[row] = pos % fold_count;
    }
    Ok(FoldAssignment { fold_of_row, fold_count })
}

// ---------------------------------------------------------------------------
// Small dense solves shared by the estimators
// ---------------------------------------------------------------------------

/// Diagnostics from a symmetric solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveDiag {
    /// Ridge jitter was added to make the factorization succeed.
    pub ridge_fallback: bool,
    /// The system is rank deficient beyond repair; the solution is not
    /// trustworthy and downstream intervals should be infinite.
    pub singular: bool,
    /// Crude condition estimate from the Cholesky diagonal.
    pub cond: f64,
}

const RIDGE_JITTER: f64 = 1e-8;

fn chol_cond(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..l.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Solve the symmetric positive semidefinite system `a x = b` for several
/// right-hand sides, retrying with ridge jitter `1e-8` when the plain
/// Cholesky factorization fails. The absolute jitter presumes roughly
/// unit-scale data.
pub fn solve_sym(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, SolveDiag) {
    let mut diag = SolveDiag::default();
    let d_max = (0..a.nrows()).map(|i| a[(i, i)].abs()).fold(0.0f64, f64::max);
    if !d_max.is_finite() {
        diag.singular = true;
        return (DMatrix::zeros(a.nrows(), b.ncols()), diag);
    }
    if let Some(chol) = a.clone().cholesky() {
        diag.cond = chol_cond(&chol);
        // the factorization can go through numerically on a rank-deficient
        // matrix; treat extreme conditioning as a failure too
        if diag.cond <= 1e12 {
            return (chol.solve(b), diag);
        }
    }
    diag.ridge_fallback = true;
    let mut jittered = a.clone();
    for i in 0..a.nrows() {
        jittered[(i, i)] += RIDGE_JITTER;
    }
    if let Some(chol) = jittered.cholesky() {
        diag.cond = chol_cond(&chol);
        // Everything the data contributed sits at or below jitter scale, or
        // the jittered system is still numerically rank deficient.
        if d_max < 1e-10 || diag.cond > 1e10 {
            diag.singular = true;
        }
        return (chol.solve(b), diag);
    }
    diag.singular = true;
    (DMatrix::zeros(a.nrows(), b.ncols()), diag)
}

/// Vector right-hand-side convenience wrapper around [`solve_sym`].
pub fn solve_sym_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, SolveDiag) {
    let (m, diag) = solve_sym(a, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
    (DVector::from_column_slice(m.column(0).as_slice()), diag)
}

/// Project a symmetric matrix to the PSD cone with an eigenvalue floor.
pub fn psd_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

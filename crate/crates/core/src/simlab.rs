//! Simulation lab: data generators for five synthetic examples, independent
//! ground-truth oracles, and a coverage-study runner.
//!
//! The examples (all with `h = 5` remaining covariates and unit noise):
//!
//! 1. `Y = 2X + e`, `Z_1 = delta X + xi` — a correlation knob `delta`.
//! 2. `Y = 2X^3 + e`, `Z_1 = X + N(0, 0.4^2)`.
//! 3. `X_1 = 2Z_1 + e_1`, `X_2 = 2Z_2 + e_2`, `Y = 2 X_1 X_2 + e`.
//! 4. `X, Z ~ U(-1,1)`, `Y = X^2(X + 7/5) + (25/9) Z_1^2 + e`.
//! 5. `Y = 2X^2 + X Z_1 + e`, `Z_1 = X + N(0, 0.4^2)`.
//!
//! Examples 2, 4, 5 replace `X` by degree-3 orthogonal polynomials by
//! default. Oracle values are closed form where available and otherwise a
//! Monte Carlo average under the decorrelated distribution, computed
//! directly from the known regression function, never through the
//! estimators.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{orthogonal_basis, Dataset};
use crate::density::KdeConfig;
use crate::error::{Error, Result};
use crate::estimators::{cross_fit, EstimateOptions, ParameterId};
use crate::nuisance::NuisanceSpec;
use crate::rng;

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

pub const EXAMPLE_H: usize = 5;

/// Configuration of one synthetic draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub example_id: u8,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Correlation knob, Example 1 only.
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Replace `X` with degree-3 orthogonal polynomials. `None` keeps the
    /// per-example default (on for 2, 4, 5).
    #[serde(default)]
    pub basis_expand: Option<bool>,
}

fn default_n() -> usize {
    10_000
}

impl GeneratorConfig {
    pub fn new(example_id: u8, n: usize, delta: f64, seed: u64) -> Self {
        GeneratorConfig { example_id, n, delta, seed, basis_expand: None }
    }

    pub fn basis_expanded(&self) -> bool {
        self.basis_expand.unwrap_or(matches!(self.example_id, 2 | 4 | 5))
    }
}

struct JointDraw {
    x: Vec<f64>,
    z: Vec<f64>,
}

/// One draw of `(X, Z)` from the joint distribution (no response noise).
fn draw_covariates(example_id: u8, delta: f64, r: &mut ChaCha8Rng) -> JointDraw {
    let mut normal = || -> f64 { StandardNormal.sample(r) };
    match example_id {
        1 => {
            let x = normal();
            let mut z = vec![delta * x + normal()];
            for _ in 1..EXAMPLE_H {
                z.push(normal());
            }
            JointDraw { x: vec![x], z }
        }
        2 | 5 => {
            let x = normal();
            let mut z = vec![x + 0.4 * normal()];
            for _ in 1..EXAMPLE_H {
                z.push(normal());
            }
            JointDraw { x: vec![x], z }
        }
        3 => {
            let z: Vec<f64> = (0..EXAMPLE_H).map(|_| normal()).collect();
            let x = vec![2.0 * z[0] + normal(), 2.0 * z[1] + normal()];
            JointDraw { x, z }
        }
        4 => {
            let mut uniform = || -> f64 { r.random_range(-1.0..1.0) };
            let x = vec![uniform()];
            let z: Vec<f64> = (0..EXAMPLE_H).map(|_| uniform()).collect();
            JointDraw { x, z }
        }
        other => panic!("example id {other} out of range"),
    }
}

/// The true regression function of each example, on the raw `X` scale.
fn true_mu(example_id: u8, x: &[f64], z: &[f64]) -> f64 {
    match example_id {
        1 => 2.0 * x[0],
        2 => 2.0 * x[0].powi(3),
        3 => 2.0 * x[0] * x[1],
        4 => x[0].powi(2) * (x[0] + 1.4) + 25.0 / 9.0 * z[0] * z[0],
        5 => 2.0 * x[0] * x[0] + x[0] * z[0],
        other => panic!("example id {other} out of range"),
    }
}

/// `mu_0(z) = ∫ mu(x, z) p(x) dx`, analytically.
fn true_mu0(example_id: u8, z: &[f64]) -> f64 {
    match example_id {
        1 | 2 | 3 => 0.0,
        4 => 7.0 / 15.0 + 25.0 / 9.0 * z[0] * z[0],
        5 => 2.0,
        other => panic!("example id {other} out of range"),
    }
}

/// `E[Y | Z = z]`, analytically (for the plain LOCO oracle).
fn true_mu_p(example_id: u8, z: &[f64], delta: f64) -> f64 {
    match example_id {
        1 => 2.0 * delta * z[0] / (1.0 + delta * delta),
        2 => {
            // X | Z_1 = z is N(z / 1.16, 0.16 / 1.16)
            let m = z[0] / 1.16;
            let v = 0.16 / 1.16;
            2.0 * (m.powi(3) + 3.0 * m * v)
        }
        3 => 8.0 * z[0] * z[1],
        4 => 7.0 / 15.0 + 25.0 / 9.0 * z[0] * z[0],
        5 => {
            let m = z[0] / 1.16;
            let v = 0.16 / 1.16;
            2.0 * (m * m + v) + m * z[0]
        }
        other => panic!("example id {other} out of range"),
    }
}

/// Draw a dataset from the example's data generating process.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    if !(1..=5).contains(&config.example_id) {
        return Err(Error::InvalidConfig(format!(
            "example id must be 1..=5, got {}",
            config.example_id
        )));
    }
    let mut r = rng::stream(config.seed, "generate", config.example_id as u64);
    let g_raw = if config.example_id == 3 { 2 } else { 1 };
    let n = config.n;
    let mut x = DMatrix::zeros(n, g_raw);
    let mut z = DMatrix::zeros(n, EXAMPLE_H);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let draw = draw_covariates(config.example_id, config.delta, &mut r);
        let noise: f64 = StandardNormal.sample(&mut r);
        for (j, v) in draw.x.iter().enumerate() {
            x[(i, j)] = *v;
        }
        for (j, v) in draw.z.iter().enumerate() {
            z[(i, j)] = *v;
        }
        y[i] = true_mu(config.example_id, &draw.x, &draw.z) + noise;
    }
    let (x, x_names) = if config.basis_expanded() {
        let mut blocks = Vec::new();
        let mut names = Vec::new();
        for col in 0..g_raw {
            let b = orthogonal_basis(&x.column(col).into_owned(), 3)?;
            for d in 1..=3 {
                names.push(format!("x{}_b{}", col + 1, d));
            }
            blocks.push(b);
        }
        let mut expanded = DMatrix::zeros(n, 3 * g_raw);
        for (k, b) in blocks.iter().enumerate() {
            expanded.view_mut((0, 3 * k), (n, 3)).copy_from(b);
        }
        (expanded, names)
    } else {
        (x, (1..=g_raw).map(|j| format!("x{j}")).collect())
    };
    Dataset::new(
        x,
        z,
        y,
        x_names,
        (1..=EXAMPLE_H).map(|j| format!("z{j}")).collect(),
        "y".into(),
    )
}

// ---------------------------------------------------------------------------
// Ground-truth oracles
// ---------------------------------------------------------------------------

/// Exact value of example 4's decorrelated importance,
/// `E[(X^3 + 1.4 X^2 - 7/15)^2]` under `X ~ U(-1, 1)`.
pub fn example4_psi0() -> f64 {
    1.0 / 7.0 + 1.96 / 5.0 + 49.0 / 225.0 - 2.0 * (7.0 / 15.0) * 1.4 / 3.0
}

fn psi0_closed_form(example_id: u8) -> f64 {
    match example_id {
        1 => 4.0,
        2 => 60.0,
        3 => 100.0,
        4 => example4_psi0(),
        5 => 9.16,
        other => panic!("example id {other} out of range"),
    }
}

/// Population screening outcome for Example 1: is `Z_1` dropped at the
/// default threshold 0.5?
fn example1_screens_out_z1(delta: f64) -> bool {
    delta / (1.0 + delta * delta).sqrt() > 0.5
}

/// Ground truth for `(example, parameter, delta)`: closed form where
/// available, otherwise a 10^6-draw Monte Carlo average under the
/// decorrelated distribution using the known regression function.
pub fn true_psi(example_id: u8, parameter_id: ParameterId, delta: f64) -> Result<f64> {
    if !(1..=5).contains(&example_id) {
        return Err(Error::InvalidConfig(format!("example id {example_id} out of range")));
    }
    let undefined = || Error::UnsupportedParameter {
        parameter: parameter_id.to_string(),
        reason: format!("no ground-truth value defined for example {example_id}"),
    };
    match parameter_id {
        ParameterId::Psi0
        | ParameterId::Psi2
        | ParameterId::Psi3
        | ParameterId::Psi4 => Ok(psi0_closed_form(example_id)),
        ParameterId::PsiL => match example_id {
            1 => Ok(4.0 / (1.0 + delta * delta)),
            3 => Ok(36.0),
            4 => Ok(example4_psi0()),
            _ => mc_true_psi(example_id, ParameterId::PsiL, delta, 1_000_000, 0x0c0ffee),
        },
        ParameterId::Psi1 => match example_id {
            1 => {
                if example1_screens_out_z1(delta) {
                    Ok(4.0)
                } else {
                    Ok(4.0 / (1.0 + delta * delta))
                }
            }
            2 => Ok(60.0),
            3 => Ok(100.0),
            4 => Ok(example4_psi0()),
            5 => Ok(18.0),
            _ => Err(undefined()),
        },
        ParameterId::Rho0 => match example_id {
            // num / (sigma_X sqrt(E_0[(Y - mu_0(Z))^2]))
            1 => Ok(2.0 / 5.0f64.sqrt()),
            4 => {
                let num = 0.2; // E[(X^3 + 1.4 X^2 - 7/15) X] = E[X^4]
                let var_x: f64 = 1.0 / 3.0;
                let denom = example4_psi0() + 1.0;
                Ok(num / (var_x.sqrt() * denom.sqrt()))
            }
            _ => Err(undefined()),
        },
        ParameterId::AuxDerivative | ParameterId::AuxGformula => match example_id {
            1 => Ok(4.0),
            _ => Err(undefined()),
        },
    }
}

/// Monte Carlo oracle, independent of the estimators: a direct expectation
/// of `(mu - mu_0)^2` (and relatives) under simulated independent `(X, Z)`.
/// Independence is achieved by pairing the covariates of one joint draw
/// with the `Z` block of a second, independent draw.
pub fn mc_true_psi(
    example_id: u8,
    parameter_id: ParameterId,
    delta: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if !(1..=5).contains(&example_id) {
        return Err(Error::InvalidConfig(format!("example id {example_id} out of range")));
    }
    let mut r = rng::stream(seed, "mc-oracle", example_id as u64);
    let mut acc = 0.0;
    match parameter_id {
        ParameterId::Psi0 | ParameterId::Psi2 | ParameterId::Psi3 | ParameterId::Psi4 => {
            for _ in 0..draws {
                let a = draw_covariates(example_id, delta, &mut r);
                let b = draw_covariates(example_id, delta, &mut r);
                let m = true_mu(example_id, &a.x, &b.z);
                acc += (m - true_mu0(example_id, &b.z)).powi(2);
            }
            Ok(acc / draws as f64)
        }
        ParameterId::PsiL => {
            for _ in 0..draws {
                let a = draw_covariates(example_id, delta, &mut r);
                let m = true_mu(example_id, &a.x, &a.z);
                acc += (m - true_mu_p(example_id, &a.z, delta)).powi(2);
            }
            Ok(acc / draws as f64)
        }
        ParameterId::Psi1 => match example_id {
            5 => {
                // screening drops Z_1; E[Y | X, V] = 3 X^2, E[Y | V] = 3
                for _ in 0..draws {
                    let a = draw_covariates(example_id, delta, &mut r);
                    acc += (3.0 * a.x[0] * a.x[0] - 3.0).powi(2);
                }
                Ok(acc / draws as f64)
            }
            _ => true_psi(example_id, parameter_id, delta),
        },
        ParameterId::Rho0 => {
            let mut num = 0.0;
            let mut var_x = 0.0;
            let mut mean_x = 0.0;
            for _ in 0..draws {
                let a = draw_covariates(example_id, delta, &mut r);
                let b = draw_covariates(example_id, delta, &mut r);
                let m = true_mu(example_id, &a.x, &b.z);
                num += (m - true_mu0(example_id, &b.z)) * a.x[0];
                mean_x += a.x[0];
                var_x += a.x[0] * a.x[0];
                acc += (m - true_mu0(example_id, &b.z)).powi(2);
            }
            let d = draws as f64;
            mean_x /= d;
            var_x = var_x / d - mean_x * mean_x;
            let denom = acc / d + 1.0; // unit response noise
            Ok((num / d) / (var_x.sqrt() * denom.sqrt()))
        }
        _ => true_psi(example_id, parameter_id, delta),
    }
}

// ---------------------------------------------------------------------------
// Coverage studies
// ---------------------------------------------------------------------------

/// Which value the intervals are checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverageTarget {
    /// Each parameter against its own ground truth.
    OwnValue,
    /// Every parameter against one parameter's ground truth (the studies
    /// here target the decorrelated importance `psi_0`).
    Parameter(ParameterId),
}

impl Serialize for CoverageTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CoverageTarget::OwnValue => s.serialize_str("self"),
            CoverageTarget::Parameter(p) => s.serialize_str(p.as_str()),
        }
    }
}

impl<'de> Deserialize<'de> for CoverageTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == "self" {
            return Ok(CoverageTarget::OwnValue);
        }
        raw.parse::<ParameterId>()
            .map(CoverageTarget::Parameter)
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}

/// Rule for the conservative interval constant `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CRule {
    /// The default: squared sample variance of `Y`, per replicate.
    VarYSquared,
    /// Sample variance of `Y` (unsquared), per replicate.
    VarY,
    /// A fixed override.
    Fixed { value: f64 },
}

/// One example arm of a study, with the `delta` grid to sweep (a single
/// entry for examples without the knob).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleArm {
    pub example_id: u8,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub basis_expand: Option<bool>,
}

fn default_deltas() -> Vec<f64> {
    vec![0.0]
}

/// Full description of a coverage study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub name: String,
    pub examples: Vec<ExampleArm>,
    /// Nuisance families by name: linear, additive, forest.
    pub families: Vec<String>,
    pub parameters: Vec<ParameterId>,
    pub n: usize,
    pub replicates: usize,
    #[serde(default = "default_fold_count")]
    pub fold_count: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_target")]
    pub target: CoverageTarget,
    #[serde(default = "default_c_rule")]
    pub c_rule: CRule,
    #[serde(default = "default_threshold")]
    pub screening_threshold: f64,
    #[serde(default = "default_clip")]
    pub clip_max: f64,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_fold_count() -> usize {
    5
}
fn default_alpha() -> f64 {
    0.05
}
fn default_target() -> CoverageTarget {
    CoverageTarget::Parameter(ParameterId::Psi0)
}
fn default_c_rule() -> CRule {
    CRule::VarYSquared
}
fn default_threshold() -> f64 {
    0.5
}
fn default_clip() -> f64 {
    50.0
}
fn default_mc_draws() -> usize {
    1000
}

/// One row of a replicate-level record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub example_id: u8,
    pub delta: f64,
    pub family: String,
    pub parameter: ParameterId,
    pub replicate: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub infinite_interval: bool,
    pub true_value: f64,
}

/// Aggregated coverage for one `(example, delta, family, parameter)` cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageRow {
    pub example_id: u8,
    pub delta: f64,
    pub family: String,
    pub parameter: ParameterId,
    pub coverage: f64,
    /// Means over replicates with finite intervals.
    pub mean_ci_low: f64,
    pub mean_ci_high: f64,
    pub mean_width: f64,
    pub mean_estimate: f64,
    pub true_value: f64,
    pub replicates_done: usize,
    pub failed_replicates: usize,
    pub infinite_intervals: usize,
    /// More than 20% of replicates failed outright.
    pub degraded: bool,
    /// Wall time, excluded from the serialized report so reruns are
    /// byte-identical; see the timing sidecar.
    #[serde(skip)]
    pub wall_ms: u128,
}

/// Full study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: StudyConfig,
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    pub fn row(
        &self,
        example_id: u8,
        delta: f64,
        family: &str,
        parameter: ParameterId,
    ) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| {
            r.example_id == example_id
                && (r.delta - delta).abs() < 1e-12
                && r.family == family
                && r.parameter == parameter
        })
    }
}

fn cell_hash(example: u8, delta: f64, family: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u64| {
        h ^= b;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    eat(example as u64);
    eat(delta.to_bits());
    for b in family.as_bytes() {
        eat(*b as u64);
    }
    h
}

/// Run a coverage study: for every cell and replicate, draw data, cross-fit
/// every parameter, and record whether each interval covers its target.
/// Replicates run in parallel; each derives its random stream from
/// `(seed, cell, replicate)`, so results are schedule independent.
pub fn run_coverage(config: &StudyConfig) -> Result<(CoverageReport, Vec<ReplicateRecord>)> {
    for f in &config.families {
        NuisanceSpec::from_name(f)?;
    }
    let mut cells = Vec::new();
    for arm in &config.examples {
        for &delta in &arm.deltas {
            for family in &config.families {
                cells.push((arm.example_id, delta, family.clone(), arm.basis_expand));
            }
        }
    }

    // target values, resolved once per (example, delta, parameter)
    let mut targets: BTreeMap<(u8, u64, ParameterId), f64> = BTreeMap::new();
    for arm in &config.examples {
        for &delta in &arm.deltas {
            for &param in &config.parameters {
                let value = match config.target {
                    CoverageTarget::OwnValue => true_psi(arm.example_id, param, delta)?,
                    CoverageTarget::Parameter(p) => true_psi(arm.example_id, p, delta)?,
                };
                targets.insert((arm.example_id, delta.to_bits(), param), value);
            }
        }
    }

    let mut rows = Vec::new();
    let mut all_records = Vec::new();
    for (example_id, delta, family, basis_expand) in cells {
        let start = std::time::Instant::now();
        let spec = NuisanceSpec::from_name(&family)?;
        let chash = cell_hash(example_id, delta, &family);
        let results: Vec<Result<Vec<ReplicateRecord>>> = (0..config.replicates)
            .into_par_iter()
            .map(|rep| {
                run_replicate(
                    config,
                    example_id,
                    delta,
                    &family,
                    basis_expand,
                    &spec,
                    chash,
                    rep,
                    &targets,
                )
            })
            .collect();

        let mut failed = 0usize;
        let mut per_param: BTreeMap<ParameterId, Vec<&ReplicateRecord>> = BTreeMap::new();
        let mut cell_records = Vec::new();
        for r in &results {
            match r {
                Ok(records) => cell_records.extend(records.iter().cloned()),
                Err(_) => failed += 1,
            }
        }
        for rec in &cell_records {
            per_param.entry(rec.parameter).or_default().push(rec);
        }
        for &param in &config.parameters {
            let records = per_param.get(&param).cloned().unwrap_or_default();
            if records.is_empty() {
                continue;
            }
            let done = records.len();
            let covered = records.iter().filter(|r| r.covered).count();
            let finite: Vec<&&ReplicateRecord> =
                records.iter().filter(|r| !r.infinite_interval).collect();
            let fcount = finite.len().max(1) as f64;
            let mean_ci_low = finite.iter().map(|r| r.ci_low).sum::<f64>() / fcount;
            let mean_ci_high = finite.iter().map(|r| r.ci_high).sum::<f64>() / fcount;
            let mean_width =
                finite.iter().map(|r| r.ci_high - r.ci_low).sum::<f64>() / fcount;
            let mean_estimate = finite.iter().map(|r| r.estimate).sum::<f64>() / fcount;
            rows.push(CoverageRow {
                example_id,
                delta,
                family: family.clone(),
                parameter: param,
                coverage: covered as f64 / done as f64,
                mean_ci_low,
                mean_ci_high,
                mean_width,
                mean_estimate,
                true_value: targets[&(example_id, delta.to_bits(), param)],
                replicates_done: done,
                failed_replicates: failed,
                infinite_intervals: done - finite.len(),
                degraded: failed * 5 > config.replicates,
                wall_ms: start.elapsed().as_millis(),
            });
        }
        all_records.extend(cell_records);
    }
    Ok((CoverageReport { config: config.clone(), rows }, all_records))
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    config: &StudyConfig,
    example_id: u8,
    delta: f64,
    family: &str,
    basis_expand: Option<bool>,
    spec: &NuisanceSpec,
    cell_hash: u64,
    replicate: usize,
    targets: &BTreeMap<(u8, u64, ParameterId), f64>,
) -> Result<Vec<ReplicateRecord>> {
    let rep_seed = rng::derive_seed(config.seed, "replicate", cell_hash ^ replicate as u64);
    let gen_config = GeneratorConfig {
        example_id,
        n: config.n,
        delta,
        seed: rng::derive_seed(rep_seed, "data", 0),
        basis_expand,
    };
    let data = generate(&gen_config)?;
    let c_override = match config.c_rule {
        CRule::VarYSquared => None,
        CRule::VarY => {
            let mean = data.y.mean();
            Some(data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.n() as f64)
        }
        CRule::Fixed { value } => Some(value),
    };
    let opts = EstimateOptions {
        parameters: config.parameters.clone(),
        nuisance: spec.clone(),
        fold_count: config.fold_count,
        alpha: config.alpha,
        screening_threshold: config.screening_threshold,
        kde: KdeConfig { clip_max: config.clip_max, mc_draws: config.mc_draws },
        seed: rng::derive_seed(rep_seed, "estimate", 0),
        c_override,
        psi0_one_step: false,
    };
    let results = cross_fit(&data, &opts)?;
    let mut records = Vec::with_capacity(results.len());
    for res in results {
        let param: ParameterId = res.parameter_id.parse()?;
        let truth = targets[&(example_id, delta.to_bits(), param)];
        let covered = res.ci_low <= truth && truth <= res.ci_high;
        records.push(ReplicateRecord {
            example_id,
            delta,
            family: family.to_string(),
            parameter: param,
            replicate,
            estimate: res.psi_bar,
            ci_low: res.ci_low,
            ci_high: res.ci_high,
            covered,
            infinite_interval: res.infinite_flag,
            true_value: truth,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

fn float_cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Per-replicate CSV.
pub fn replicates_csv(records: &[ReplicateRecord]) -> String {
    let mut out = String::from(
        "example,delta,family,parameter,replicate,estimate,ci_low,ci_high,covered,true_value\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.example_id,
            r.delta,
            r.family,
            r.parameter,
            r.replicate,
            float_cell(r.estimate),
            float_cell(r.ci_low),
            float_cell(r.ci_high),
            r.covered,
            r.true_value,
        ));
    }
    out
}

/// Tidy CSV of mean interval endpoints per cell, for external plotting.
pub fn plot_data_csv(report: &CoverageReport) -> String {
    let mut out =
        String::from("example,nuisance,parameter,delta,ci_low_mean,ci_high_mean,coverage\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.example_id,
            r.family,
            r.parameter,
            r.delta,
            float_cell(r.mean_ci_low),
            float_cell(r.mean_ci_high),
            r.coverage,
        ));
    }
    out
}

/// Write `report.json`, `replicates.csv`, `plot_data.csv`, and the timing
/// sidecar `timing.json` into `out_dir`.
pub fn write_artifacts(
    report: &CoverageReport,
    records: &[ReplicateRecord],
    out_dir: &std::path::Path,
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    };
    std::fs::create_dir_all(out_dir).map_err(io_err)?;
    let report_json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Numerical(format!("serialize report: {e}")))?;
    std::fs::write(out_dir.join("report.json"), report_json).map_err(io_err)?;
    std::fs::write(out_dir.join("replicates.csv"), replicates_csv(records)).map_err(io_err)?;
    std::fs::write(out_dir.join("plot_data.csv"), plot_data_csv(report)).map_err(io_err)?;
    let mut timing = String::from("{\n  \"cells_ms\": [\n");
    for (i, r) in report.rows.iter().enumerate() {
        timing.push_str(&format!(
            "    {{\"example\": {}, \"delta\": {}, \"family\": \"{}\", \"parameter\": \"{}\", \"ms\": {}}}{}\n",
            r.example_id,
            r.delta,
            r.family,
            r.parameter,
            r.wall_ms,
            if i + 1 == report.rows.len() { "" } else { "," }
        ));
    }
    timing.push_str("  ]\n}\n");
    let mut f = std::fs::File::create(out_dir.join("timing.json")).map_err(io_err)?;
    f.write_all(timing.as_bytes()).map_err(io_err)?;
    Ok(())
}

//! Command-line surface: estimation on user data, simulation studies,
//! oracle queries, and report summarization.
//!
//! Every run writes a `manifest.json` with the fully resolved configuration
//! next to its outputs; re-running with `--manifest` reproduces the outputs
//! byte for byte.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use decoloco::balance;
use decoloco::data;
use decoloco::density::KdeConfig;
use decoloco::error::{Error, Result};
use decoloco::estimators::{cross_fit, EstimateOptions, ParameterId};
use decoloco::nuisance::NuisanceSpec;
use decoloco::simlab::{self, StudyConfig};
use decoloco::Dataset;

#[derive(Parser)]
#[command(
    name = "decoloco",
    version,
    about = "Decorrelated variable importance: estimation, simulation studies, and oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate importance parameters on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a coverage study from a JSON study config.
    Simulate(SimulateArgs),
    /// Print the ground-truth value of a parameter for a synthetic example.
    Oracle(OracleArgs),
    /// Summarize a coverage report as a table.
    Report(ReportArgs),
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct EstimateArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: Option<String>,
    /// X columns (comma separated; ranges like x1..x3 allowed). Default:
    /// the first column.
    #[arg(long)]
    x: Option<String>,
    /// Z columns. Default: everything that is not X or Y.
    #[arg(long)]
    z: Option<String>,
    /// Y column. Default: the last column.
    #[arg(long)]
    y: Option<String>,
    /// Parameters to estimate.
    #[arg(long, default_value = "psi_L,psi_2,psi_3")]
    params: String,
    /// Nuisance family: linear, additive, or forest.
    #[arg(long, default_value = "additive")]
    nuisance: String,
    /// JSON file with a full nuisance spec (overrides --nuisance).
    #[arg(long)]
    nuisance_json: Option<String>,
    /// Number of cross-fitting folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Correlation-screening threshold for psi_1.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Density-ratio clip for psi_0 / rho_0.
    #[arg(long, default_value_t = 50.0)]
    clip_max: f64,
    /// Monte Carlo draws for the density-based integrals.
    #[arg(long, default_value_t = 1000)]
    mc_draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the conservative interval constant (default: squared sample
    /// variance of Y).
    #[arg(long)]
    c_override: Option<f64>,
    /// Report the one-step form of psi_0 instead of the estimating-equation
    /// form.
    #[arg(long, default_value_t = false)]
    psi0_one_step: bool,
    /// Replace each X column by degree-3 orthogonal polynomials.
    #[arg(long, default_value_t = false)]
    basis_expand: bool,
    /// Also estimate psi_L with covariate-balancing weights and export the
    /// weights.
    #[arg(long, default_value_t = false)]
    balanced: bool,
    #[arg(long, default_value_t = 2)]
    balance_x_degree: usize,
    #[arg(long, default_value_t = 2)]
    balance_z_degree: usize,
    /// Output directory.
    #[arg(long, default_value = "decoloco-out")]
    out: String,
    /// Re-run a previously written manifest (ignores the other flags).
    #[arg(long)]
    #[serde(skip_serializing, default)]
    manifest: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study config JSON (see the configs/ directory for examples).
    #[arg(long)]
    study: Option<String>,
    /// Override the study seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "decoloco-out")]
    out: String,
    /// Re-run a previously written manifest.
    #[arg(long)]
    manifest: Option<String>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    example: u8,
    #[arg(long)]
    param: String,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// Compute by Monte Carlo instead of the closed form.
    #[arg(long)]
    mc_draws: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json produced by `simulate`.
    #[arg(long)]
    input: String,
}

#[derive(Serialize, Deserialize)]
struct EstimateManifest {
    command: String,
    version: String,
    args: EstimateArgs,
}

#[derive(Serialize, Deserialize)]
struct SimulateManifest {
    command: String,
    version: String,
    study: StudyConfig,
}

#[derive(Parser)]
struct ManifestProbe {
    #[arg(long)]
    manifest: Option<String>,
}

fn main() {
    if let Ok(workers) = std::env::var("DECOLOCO_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code convention is 2; the contract here is
            // 1 for usage errors
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => report_error(e),
    };
    std::process::exit(code);
}

fn report_error(e: Error) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Oracle(args) => run_oracle(args),
        Command::Report(args) => run_report(args),
    }
}

fn rerun_estimate_manifest(path: &str) -> Result<i32> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_string(),
        source: e,
    })?;
    let manifest: EstimateManifest = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("bad manifest {path}: {e}")))?;
    if manifest.command != "estimate" {
        return Err(Error::InvalidConfig(format!(
            "manifest {path} is for command {:?}",
            manifest.command
        )));
    }
    run_estimate(manifest.args)
}

/// Default column partition: first column X, last column Y, the rest Z.
fn default_selectors(path: &str) -> Result<(String, String, String)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let header: Vec<String> =
        reader.headers().map_err(|e| Error::Csv(e.to_string()))?.iter().map(String::from).collect();
    if header.len() < 2 {
        return Err(Error::Csv("need at least two columns".into()));
    }
    let x = header[0].clone();
    let y = header[header.len() - 1].clone();
    let z = header[1..header.len() - 1].join(",");
    Ok((x, z, y))
}

fn load_for_estimate(args: &EstimateArgs) -> Result<Dataset> {
    let path = args
        .data
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("estimate requires --data".into()))?;
    let (dx, dz, dy) = match (&args.x, &args.z, &args.y) {
        (Some(x), Some(z), Some(y)) => (x.clone(), z.clone(), y.clone()),
        _ => {
            let (x, z, y) = default_selectors(path)?;
            (
                args.x.clone().unwrap_or(x),
                args.z.clone().unwrap_or(z),
                args.y.clone().unwrap_or(y),
            )
        }
    };
    let mut data = data::load_csv(path, &dx, &dz, &dy)?;
    if args.basis_expand {
        data = expand_x_basis(&data)?;
    }
    Ok(data)
}

fn expand_x_basis(data: &Dataset) -> Result<Dataset> {
    let n = data.n();
    let g = data.g();
    let mut expanded = nalgebra::DMatrix::zeros(n, 3 * g);
    let mut names = Vec::new();
    for col in 0..g {
        let b = data::orthogonal_basis(&data.x.column(col).into_owned(), 3)?;
        expanded.view_mut((0, 3 * col), (n, 3)).copy_from(&b);
        for d in 1..=3 {
            names.push(format!("{}_b{}", data.x_names[col], d));
        }
    }
    Dataset::new(
        expanded,
        data.z.clone(),
        data.y.clone(),
        names,
        data.z_names.clone(),
        data.y_name.clone(),
    )
}

fn parse_params(raw: &str) -> Result<Vec<ParameterId>> {
    let mut out = Vec::new();
    for p in raw.split(',') {
        let p = p.trim();
        if p.is_empty() {
            continue;
        }
        out.push(p.parse::<ParameterId>()?);
    }
    if out.is_empty() {
        return Err(Error::InvalidConfig("no parameters requested".into()));
    }
    Ok(out)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    std::fs::write(dir.join(name), text).map_err(|e| Error::Io {
        path: dir.join(name).display().to_string(),
        source: e,
    })
}

fn run_estimate(args: EstimateArgs) -> Result<i32> {
    if let Some(path) = &args.manifest {
        return rerun_estimate_manifest(path);
    }
    let data = load_for_estimate(&args)?;
    let nuisance = match &args.nuisance_json {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<NuisanceSpec>(&text)
                .map_err(|e| Error::InvalidConfig(format!("bad nuisance spec: {e}")))?
        }
        None => NuisanceSpec::from_name(&args.nuisance)?,
    };
    let opts = EstimateOptions {
        parameters: parse_params(&args.params)?,
        nuisance: nuisance.clone(),
        fold_count: args.folds,
        alpha: args.alpha,
        screening_threshold: args.threshold,
        kde: KdeConfig { clip_max: args.clip_max, mc_draws: args.mc_draws },
        seed: args.seed,
        c_override: args.c_override,
        psi0_one_step: args.psi0_one_step,
    };
    let results = cross_fit(&data, &opts)?;
    let out_dir = PathBuf::from(&args.out);
    let results_json = serde_json::to_string_pretty(&results)
        .map_err(|e| Error::Numerical(format!("serialize results: {e}")))?;
    write_text(&out_dir, "results.json", &results_json)?;

    if args.balanced {
        let (balanced, negative_fractions) = balance::weighted_psi_l(
            &data,
            &nuisance,
            (args.balance_x_degree, args.balance_z_degree),
            args.folds,
            args.alpha,
            args.c_override,
            args.seed,
        )?;
        let json = serde_json::to_string_pretty(&balanced)
            .map_err(|e| Error::Numerical(format!("serialize balanced result: {e}")))?;
        write_text(&out_dir, "balanced_psi_L.json", &json)?;
        // full-sample weights for export
        let basis = balance::MomentBasis::default_products(
            &data,
            args.balance_x_degree,
            args.balance_z_degree,
            25,
        )?;
        let weights = balance::solve_balance_weights(&data, &basis)?;
        write_text(&out_dir, "weights.csv", &weights.to_csv())?;
        eprintln!(
            "balanced psi_L: {:.6} (negative-weight fractions per fold: {:?})",
            balanced.psi_bar, negative_fractions
        );
    }

    let manifest = EstimateManifest {
        command: "estimate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        args,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numerical(format!("serialize manifest: {e}")))?;
    write_text(&out_dir, "manifest.json", &manifest_json)?;

    for r in &results {
        println!(
            "{}: {} [{}, {}]{}",
            r.parameter_id,
            fmt_float(r.psi_bar),
            fmt_float(r.ci_low),
            fmt_float(r.ci_high),
            if r.infinite_flag { " (singular fold: infinite interval)" } else { "" }
        );
    }
    // exit 3 when estimation failed numerically across the board
    let all_singular = results
        .iter()
        .any(|r| r.infinite_flag && r.fold_estimates.iter().all(|v| !v.is_finite()));
    Ok(if all_singular { 3 } else { 0 })
}

fn run_simulate(args: SimulateArgs) -> Result<i32> {
    let mut study: StudyConfig = if let Some(path) = &args.manifest {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let manifest: SimulateManifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("bad manifest {path}: {e}")))?;
        manifest.study
    } else {
        let path = args
            .study
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("simulate requires --study or --manifest".into()))?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_string(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("bad study config {path}: {e}")))?
    };
    if let Some(seed) = args.seed {
        study.seed = seed;
    }
    let (report, records) = simlab::run_coverage(&study)?;
    let out_dir = PathBuf::from(&args.out);
    simlab::write_artifacts(&report, &records, &out_dir)?;
    let manifest = SimulateManifest {
        command: "simulate".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        study,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numerical(format!("serialize manifest: {e}")))?;
    write_text(&out_dir, "manifest.json", &manifest_json)?;
    print_report(&report);
    Ok(0)
}

fn run_oracle(args: OracleArgs) -> Result<i32> {
    let param: ParameterId = args.param.parse()?;
    let value = match args.mc_draws {
        Some(draws) => simlab::mc_true_psi(args.example, param, args.delta, draws, args.seed)?,
        None => simlab::true_psi(args.example, param, args.delta)?,
    };
    println!("{value:?}");
    Ok(0)
}

fn run_report(args: ReportArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| Error::Io {
        path: args.input.clone(),
        source: e,
    })?;
    let report: simlab::CoverageReport = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("bad report {}: {e}", args.input)))?;
    print_report(&report);
    Ok(0)
}

fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn print_report(report: &simlab::CoverageReport) {
    println!(
        "study {:?}: n = {}, replicates = {}, target = {}",
        report.config.name,
        report.config.n,
        report.config.replicates,
        serde_json::to_string(&report.config.target).unwrap_or_default()
    );
    println!(
        "{:<8} {:>6} {:<9} {:<10} {:>9} {:>12} {:>24} {:>8}",
        "example", "delta", "family", "parameter", "coverage", "true", "mean CI", "inf/fail"
    );
    for r in &report.rows {
        println!(
            "{:<8} {:>6} {:<9} {:<10} {:>9.3} {:>12.4} [{:>10}, {:>10}] {:>4}/{:<4}",
            r.example_id,
            r.delta,
            r.family,
            r.parameter.to_string(),
            r.coverage,
            r.true_value,
            fmt_float(r.mean_ci_low),
            fmt_float(r.mean_ci_high),
            r.infinite_intervals,
            r.failed_replicates,
        );
    }
}

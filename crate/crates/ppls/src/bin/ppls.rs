//! Command-line front end: fit a model from CSV data, compute standard
//! errors, or run a simulation scenario. Every command writes a manifest
//! with input digests and the fully resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;
use sha2::{Digest, Sha256};

use ppls::em::{e_step, fit_ppls, FitConfig, Orthogonalization};
use ppls::inference::{asymptotic_se, bootstrap_se, LoadingSE, SeMethod};
use ppls::model::{
    overlap_fraction, rv_coefficient, variance_explained, DataPair, Theta,
};
use ppls::sim::{run_scenario, Estimator, ScenarioConfig};
use ppls::PplsError;

const MANIFEST_FORMAT_VERSION: u32 = 1;

// exit codes
const EXIT_MALFORMED: u8 = 1;
const EXIT_DIMENSION: u8 = 2;
const EXIT_MAX_ITER: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_REPLICATES: u8 = 5;

#[derive(Parser)]
#[command(
    name = "ppls",
    about = "Probabilistic partial least squares: fitting, standard errors, simulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Cap on worker threads (computation is currently single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a pair of CSV matrices.
    Fit(FitArgs),
    /// Run a simulation scenario from a JSON or TOML config.
    Simulate(SimulateArgs),
    /// Standard errors for the loadings of a fitted model.
    Se(SeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV with the first data block (header row required).
    #[arg(long)]
    x: PathBuf,
    /// CSV with the second data block.
    #[arg(long)]
    y: PathBuf,
    /// Keep the columns as-is instead of centering them.
    #[arg(long)]
    no_center: bool,
    /// Scale every column to unit variance after centering.
    #[arg(long)]
    unit_variance: bool,
}

#[derive(Args)]
struct FitFlags {
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    /// Log-likelihood increment below which EM stops.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = OrthoArg::Cholesky)]
    orthogonalization: OrthoArg,
    /// Seed for the initialization perturbation (0 = plain SVD start).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of latent components.
    #[arg(short, long)]
    r: usize,
    #[command(flatten)]
    fit: FitFlags,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config, JSON or TOML by file extension.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fitted parameters (theta.json from `ppls fit`).
    #[arg(long)]
    theta: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Bootstrap replicates (ignored for the asymptotic method).
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrthoArg {
    Cholesky,
    Eigen,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Asymptotic,
    Bootstrap,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<PplsError> for CliError {
    fn from(err: PplsError) -> Self {
        let code = match &err {
            PplsError::DimensionMismatch { .. } | PplsError::NonSquareCrossBlock { .. } => {
                EXIT_DIMENSION
            }
            PplsError::TooManyFailedReplicates { .. }
            | PplsError::TooManyFailedScenarioReplicates { .. } => EXIT_REPLICATES,
            _ => EXIT_NUMERICAL,
        };
        Self::new(code, err.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        Self::new(EXIT_MALFORMED, err.to_string())
    }
}

// The library reports through `log`; forward warnings to stderr.
struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Warn
    }
    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("{}: {}", record.level().to_string().to_lowercase(), record.args());
        }
    }
    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn main() -> ExitCode {
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(log::LevelFilter::Warn);
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Se(args) => cmd_se(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn read_matrix(path: &Path) -> Result<(Array2<f64>, Vec<String>), CliError> {
    let file_name = path.display();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{file_name}: {e}")))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{file_name}: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let ncols = headers.len();
    let mut values = Vec::new();
    let mut nrows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1; // 1-based data row
        let record =
            record.map_err(|e| CliError::new(EXIT_MALFORMED, format!("{file_name}: {e}")))?;
        if record.len() != ncols {
            return Err(CliError::new(
                EXIT_MALFORMED,
                format!("{file_name}: row {row} has {} fields, expected {ncols}", record.len()),
            ));
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                CliError::new(
                    EXIT_MALFORMED,
                    format!(
                        "{file_name}: non-numeric value {cell:?} at row {row}, column {:?}",
                        headers[col]
                    ),
                )
            })?;
            values.push(value);
        }
        nrows += 1;
    }
    if nrows == 0 {
        return Err(CliError::new(EXIT_MALFORMED, format!("{file_name}: no data rows")));
    }
    let matrix = Array2::from_shape_vec((nrows, ncols), values).expect("shape consistent");
    Ok((matrix, headers))
}

fn load_data(args: &DataArgs) -> Result<DataPair, CliError> {
    let (x, _) = read_matrix(&args.x)?;
    let (y, _) = read_matrix(&args.y)?;
    if x.nrows() != y.nrows() {
        return Err(CliError::new(
            EXIT_DIMENSION,
            format!(
                "{} has {} rows but {} has {}",
                args.x.display(),
                x.nrows(),
                args.y.display(),
                y.nrows()
            ),
        ));
    }
    let mut pair = DataPair::new(x, y)?;
    if !args.no_center {
        pair = pair.center();
    }
    if args.unit_variance {
        pair = pair.scale_unit_variance()?;
    }
    Ok(pair)
}

fn fit_config(flags: &FitFlags) -> FitConfig {
    FitConfig {
        max_iter: flags.max_iter,
        tol_loglik: flags.tol,
        orthogonalization: match flags.orthogonalization {
            OrthoArg::Cholesky => Orthogonalization::CholeskyLower,
            OrthoArg::Eigen => Orthogonalization::Eigenvectors,
        },
        seed: flags.seed,
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    out: &Path,
    command: &str,
    inputs: &[(&str, &Path)],
    config: serde_json::Value,
    artifacts: &[&str],
) -> Result<(), CliError> {
    let mut digests = serde_json::Map::new();
    for (name, path) in inputs {
        digests.insert(
            (*name).to_owned(),
            json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }),
        );
    }
    let manifest = json!({
        "formatVersion": MANIFEST_FORMAT_VERSION,
        "command": command,
        "timestamp": chrono::Utc::now().to_rfc3339(),
        "inputs": digests,
        "config": config,
        "artifacts": artifacts,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        Self::new(EXIT_MALFORMED, err.to_string())
    }
}

/// 17 significant digits; round-trips every f64 exactly.
fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn cmd_fit(args: &FitArgs) -> Result<u8, CliError> {
    let data = load_data(&args.data)?;
    let limit = data.p().min(data.q()).min(data.n());
    if args.r == 0 || args.r >= limit {
        return Err(CliError::new(
            EXIT_DIMENSION,
            format!(
                "r = {} is out of range: the model requires 0 < r < min(N, p, q) = {limit}",
                args.r
            ),
        ));
    }
    let config = fit_config(&args.fit);
    let fit = fit_ppls(&data, args.r, &config)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("theta.json"), fit.theta.to_json())?;

    let mut trace = String::from("iteration,loglik\n");
    for (i, ll) in fit.loglik_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{}\n", fmt_value(*ll)));
    }
    fs::write(args.out.join("trace.csv"), trace)?;

    let (vex, vey) = variance_explained(&data, &fit.final_moments);
    let overlap = (data.p() == data.q())
        .then(|| overlap_fraction(&fit.theta))
        .transpose()?;
    let rv = rv_coefficient(&data.x().view(), &data.y().view())?;
    let summary = json!({
        "formatVersion": MANIFEST_FORMAT_VERSION,
        "n": data.n(),
        "p": data.p(),
        "q": data.q(),
        "r": args.r,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "loglik": fit.loglik_trace.last(),
        "varianceExplainedX": vex,
        "varianceExplainedY": vey,
        "overlapFraction": overlap,
        "rvCoefficient": rv,
    });
    fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    write_manifest(
        &args.out,
        "fit",
        &[("x", &args.data.x), ("y", &args.data.y)],
        json!({
            "r": args.r,
            "center": !args.data.no_center,
            "unitVariance": args.data.unit_variance,
            "maxIter": config.max_iter,
            "tol": config.tol_loglik,
            "orthogonalization": match config.orthogonalization {
                Orthogonalization::CholeskyLower => "cholesky",
                Orthogonalization::Eigenvectors => "eigen",
            },
            "seed": config.seed,
        }),
        &["theta.json", "trace.csv", "summary.json"],
    )?;
    if !fit.converged {
        eprintln!(
            "warning: stopped at the iteration cap ({}) before convergence",
            config.max_iter
        );
        return Ok(EXIT_MAX_ITER);
    }
    Ok(0)
}

fn parse_scenario_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?;
    let is_toml = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("toml"))
        .unwrap_or(false);
    let config: ScenarioConfig = if is_toml {
        toml::from_str(&text)
            .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text)
            .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{}: {e}", path.display())))?
    };
    Ok(config)
}

fn estimator_name(e: Estimator) -> &'static str {
    match e {
        Estimator::Ppls => "ppls",
        Estimator::Pls => "pls",
    }
}

/// Tidy rows: matrix,row,component,statistic,value (value empty for an
/// undefined statistic, e.g. variance from a single replicate).
fn push_tidy(
    out: &mut String,
    matrix: &str,
    values: &Array2<f64>,
    statistic: &str,
) {
    for ((i, k), v) in values.indexed_iter() {
        out.push_str(&format!("{matrix},{},{},{statistic},{}\n", i + 1, k + 1, fmt_value(*v)));
    }
}

fn push_tidy_null(out: &mut String, matrix: &str, dim: (usize, usize), statistic: &str) {
    for i in 0..dim.0 {
        for k in 0..dim.1 {
            out.push_str(&format!("{matrix},{},{},{statistic},\n", i + 1, k + 1));
        }
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8, CliError> {
    let config = parse_scenario_config(&args.config)?;
    let result = run_scenario(&config)?;
    fs::create_dir_all(&args.out)?;

    let header = "matrix,row,component,statistic,value\n";
    let mut bias = String::from(header);
    let mut variance = String::from(header);
    let mut ordering = serde_json::Map::new();
    for stats in &result.estimators {
        let name = estimator_name(stats.estimator);
        push_tidy(&mut bias, "W", &stats.bias_w, &format!("{name}_bias"));
        push_tidy(&mut bias, "C", &stats.bias_c, &format!("{name}_bias"));
        match &stats.var_w {
            Some(var) => push_tidy(&mut variance, "W", var, &format!("{name}_variance")),
            None => push_tidy_null(&mut variance, "W", stats.bias_w.dim(), &format!("{name}_variance")),
        }
        match &stats.var_c {
            Some(var) => push_tidy(&mut variance, "C", var, &format!("{name}_variance")),
            None => push_tidy_null(&mut variance, "C", stats.bias_c.dim(), &format!("{name}_variance")),
        }
        if let Some(params) = &stats.variance_params {
            let r = params.rel_bias_b.len();
            for k in 0..r {
                bias.push_str(&format!(
                    "b,1,{},{name}_rel_bias,{}\n",
                    k + 1,
                    fmt_value(params.rel_bias_b[k])
                ));
                bias.push_str(&format!(
                    "sigma_t,1,{},{name}_rel_bias,{}\n",
                    k + 1,
                    fmt_value(params.rel_bias_sigma_t[k])
                ));
            }
            for (label, bias_v, var_v) in [
                ("sigma_e", params.rel_bias_sigma_e, params.rel_var_sigma_e),
                ("sigma_f", params.rel_bias_sigma_f, params.rel_var_sigma_f),
                ("sigma_h", params.rel_bias_sigma_h, params.rel_var_sigma_h),
            ] {
                bias.push_str(&format!("{label},1,1,{name}_rel_bias,{}\n", fmt_value(bias_v)));
                if stats.replicates_used >= 2 {
                    variance
                        .push_str(&format!("{label},1,1,{name}_rel_var,{}\n", fmt_value(var_v)));
                } else {
                    variance.push_str(&format!("{label},1,1,{name}_rel_var,\n"));
                }
            }
        }
        ordering.insert(
            name.to_owned(),
            json!({
                "orderingCorrectProportion": stats.ordering_correct_proportion,
                "replicatesUsed": stats.replicates_used,
                "replicatesFailed": stats.replicates_failed,
            }),
        );
    }
    fs::write(args.out.join("bias.csv"), bias)?;
    fs::write(args.out.join("variance.csv"), variance)?;
    let ordering_doc = json!({
        "formatVersion": MANIFEST_FORMAT_VERSION,
        "estimators": ordering,
    });
    fs::write(args.out.join("ordering.json"), serde_json::to_string_pretty(&ordering_doc)? + "\n")?;

    write_manifest(
        &args.out,
        "simulate",
        &[("config", &args.config)],
        serde_json::to_value(&config)?,
        &["bias.csv", "variance.csv", "ordering.json"],
    )?;
    Ok(0)
}

fn cmd_se(args: &SeArgs) -> Result<u8, CliError> {
    let data = load_data(&args.data)?;
    let theta_text = fs::read_to_string(&args.theta)
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{}: {e}", args.theta.display())))?;
    let theta = Theta::from_json(&theta_text)
        .map_err(|e| CliError::new(EXIT_MALFORMED, format!("{}: {e}", args.theta.display())))?;
    if theta.p() != data.p() || theta.q() != data.q() {
        return Err(CliError::new(
            EXIT_DIMENSION,
            format!(
                "theta is {}x{} but the data have p = {}, q = {}",
                theta.p(),
                theta.q(),
                data.p(),
                data.q()
            ),
        ));
    }
    let config = fit_config(&args.fit);
    let se: LoadingSE = match args.method {
        MethodArg::Asymptotic => {
            let moments = e_step(&data, &theta)?;
            let fit = ppls::em::FitResult {
                theta,
                loglik_trace: Vec::new(),
                converged: true,
                iterations: 0,
                final_moments: moments,
            };
            asymptotic_se(&data, &fit)?
        }
        MethodArg::Bootstrap => {
            bootstrap_se(&data, theta.r(), &config, args.replicates, config.seed)?
        }
    };
    fs::create_dir_all(&args.out)?;
    let mut table = String::from("matrix,row,component,statistic,value\n");
    push_tidy(&mut table, "W", &se.se_w, "se");
    push_tidy(&mut table, "C", &se.se_c, "se");
    fs::write(args.out.join("se.csv"), table)?;
    if se.degenerate_w.iter().chain(&se.degenerate_c).any(|&d| d) {
        eprintln!("warning: observed information degenerate for at least one column");
    }
    write_manifest(
        &args.out,
        "se",
        &[("x", &args.data.x), ("y", &args.data.y), ("theta", &args.theta)],
        json!({
            "method": match se.method {
                SeMethod::Asymptotic => "asymptotic",
                SeMethod::Bootstrap => "bootstrap",
            },
            // The derivation covers W; C values under the asymptotic
            // method come from swapping the roles of the two blocks.
            "asymptoticCIsSymmetryExtrapolation": se.method == SeMethod::Asymptotic,
            "replicates": se.bootstrap_replicates,
            "seed": config.seed,
            "center": !args.data.no_center,
            "unitVariance": args.data.unit_variance,
            "degenerateW": se.degenerate_w,
            "degenerateC": se.degenerate_c,
        }),
        &["se.csv"],
    )?;
    Ok(0)
}

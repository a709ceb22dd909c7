mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cdcd::{CdcdError, FprDenominator, StructureKind, SupportCap};
use clap::{Args, Parser, Subcommand};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "CDCD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cdcd", version, about = "Covariate-dependent covariance and precision estimation")]
#[command(args_override_self = true)]
struct Cli {
    /// `key = value` file of subcommand flags; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for replicate and fold parallelism [default: $CDCD_THREADS or all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate replicate datasets with known covariance structure.
    Simulate(SimulateArgs),
    /// Fit a model to Y.csv / X.csv and write it as JSON.
    Fit(FitArgs),
    /// Assemble per-subject covariance and precision matrices from a model.
    Predict(PredictArgs),
    /// Replicated simulation study comparing estimators.
    Benchmark(BenchmarkArgs),
    /// Rebuild the Markdown tables from a benchmark results CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct StructureArgs {
    #[arg(long, default_value = "ar1", value_parser = parse_kind)]
    pub structure: StructureKind,
    #[arg(long)]
    pub p: usize,
    /// AR(1) correlation.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[arg(long, default_value_t = 10)]
    pub hub_block: usize,
    #[arg(long, default_value_t = 4.5)]
    pub hub_boost: f64,
    /// Fraction of nonzero strictly-lower entries (random structure).
    #[arg(long, default_value_t = 0.05)]
    pub edge_fraction: f64,
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    pub edge_value: f64,
    /// Keep one random edge pattern for all replicates.
    #[arg(long)]
    pub fixed_edges: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub structure: StructureArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub q: usize,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "simulations")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TuningArgs {
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Number of sparsity mixing values alpha.
    #[arg(long, default_value_t = 5)]
    pub alphas: usize,
    /// Number of overall penalty levels per alpha.
    #[arg(long, default_value_t = 30)]
    pub n_lambda: usize,
    /// Smallest penalty as a fraction of the largest.
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_ratio: f64,
    #[arg(long, default_value_t = 20)]
    pub n_lambda_d: usize,
    /// Support bound on tuning candidates: `none`, a count, `<c>n` or `heuristic:<c>`.
    #[arg(long, default_value = "10n", value_parser = parse_cap)]
    pub cap: SupportCap,
    /// Relative objective decrease that counts as converged [default: solver default].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Sweep limit per fit [default: solver default].
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct FitArgs {
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    /// Model JSON output.
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    /// Fit summary JSON [default: <out stem>.summary.json].
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Cross-validation report JSON.
    #[arg(long)]
    pub cv_report: Option<PathBuf>,
    /// Fixed lasso penalty (requires --lambda-g); skips tuning of the Cholesky factor.
    #[arg(long, requires = "lambda_g")]
    pub lambda: Option<f64>,
    #[arg(long, requires = "lambda")]
    pub lambda_g: Option<f64>,
    /// Fixed variance-model penalty; skips its tuning.
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Fit on the raw scale instead of standardized responses and covariates.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long, default_value = "predictions")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub structure: StructureArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub q: usize,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated subset of cdcd, dense-sample, sparse-sample.
    #[arg(long, default_value = "cdcd,dense-sample,sparse-sample", value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Label for the configuration in reports [default: <structure>_n<n>_p<p>_q<q>].
    #[arg(long)]
    pub name: Option<String>,
    /// Standardize before fitting (metrics then skip coefficient recovery).
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value = "all-slices", value_parser = parse_fpr)]
    pub fpr_denominator: FprDenominator,
    #[arg(long, default_value = "benchmark")]
    pub out: PathBuf,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    /// Long-format results CSV written by `benchmark`.
    #[arg(long)]
    pub input: PathBuf,
    /// Markdown output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<StructureKind, String> {
    s.parse().map_err(|e: CdcdError| e.to_string())
}

fn parse_fpr(s: &str) -> Result<FprDenominator, String> {
    match s {
        "all-slices" => Ok(FprDenominator::AllSlices),
        "covariate-slices" => Ok(FprDenominator::CovariateSlices),
        _ => Err(format!("expected all-slices or covariate-slices, got '{s}'")),
    }
}

pub fn parse_cap(s: &str) -> Result<SupportCap, String> {
    let bad = || format!("invalid cap '{s}' (expected none, a count, <c>n or heuristic:<c>)");
    let positive = |v: f64| if v.is_finite() && v >= 0.0 { Ok(v) } else { Err(bad()) };
    if s == "none" {
        Ok(SupportCap::None)
    } else if let Some(c) = s.strip_prefix("heuristic:") {
        Ok(SupportCap::Heuristic(positive(c.parse().map_err(|_| bad())?)?))
    } else if let Some(c) = s.strip_suffix('n') {
        Ok(SupportCap::SampleMultiple(positive(c.parse().map_err(|_| bad())?)?))
    } else {
        s.parse().map(SupportCap::Count).map_err(|_| bad())
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CdcdError> {
    if let Some(t) = flag {
        return Ok(Some(t));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CdcdError::input(format!("{THREADS_ENV} must be a thread count, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_PARTIAL: u8 = 4;

fn exit_code(e: &CdcdError) -> u8 {
    match e {
        CdcdError::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn run(cli: Cli) -> Result<ExitCode, CdcdError> {
    if let Some(t) = thread_count(cli.threads)? {
        if t == 0 {
            return Err(CdcdError::input("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CdcdError::input(format!("cannot start thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Benchmark(a) => commands::benchmark(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let args = match config::merge_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `rfsmooth fit | simulate | compare`.
//!
//! Exit codes: 0 on success with converged fits, 2 when a fit did not
//! converge (its bundle is still written), 1 on any input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rfsmooth::estimator::{fit, FitResult, OuterMethod, SmootherConfig};
use rfsmooth::rfdata::{
    export_fit, read_dataset, read_truth, simulate_rfmap, write_dataset, write_truth, GridSpec, OffsetGrid, RfDataset,
    TruthSpec,
};
use rfsmooth::Execution;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "rfsmooth",
    version,
    about = "Adaptive spatio-temporal smoothing of receptive-field count maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one smoother and write an export bundle.
    Fit(FitArgs),
    /// Simulate a receptive-field dataset from a parametric truth.
    Simulate(SimulateArgs),
    /// Fit the non-adaptive and the adaptive smoother to the same data.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Marginal B-spline basis dimensions c1,c2,c3 (row, column, time).
    #[arg(long, value_name = "A,B,C", value_parser = parse_triple, default_value = "7,7,7")]
    basis_dim: [usize; 3],
    /// Difference orders q1,q2,q3.
    #[arg(long, value_name = "A,B,C", value_parser = parse_triple, default_value = "2,2,2")]
    diff_order: [usize; 3],
    /// Sub-basis dimensions of the adaptive weights along row, column and
    /// time, shared by all three penalty directions.
    #[arg(long, value_name = "A,B,C", value_parser = parse_triple, default_value = "4,4,4")]
    adaptive_dim: [usize; 3],
    /// Relative change of the penalized deviance that stops the inner loop.
    #[arg(long, default_value_t = 1e-8)]
    inner_tol: f64,
    /// Largest change of any log smoothing weight that stops the outer loop.
    #[arg(long, default_value_t = 1e-4)]
    outer_tol: f64,
    /// Inner (penalized IRLS) iteration cap.
    #[arg(long, default_value_t = 50)]
    max_inner: usize,
    /// Outer iteration cap.
    #[arg(long, default_value_t = 200)]
    max_outer: usize,
    /// Outer update of the smoothing weights.
    #[arg(long, value_enum, default_value_t = OuterArg::Newton)]
    outer_method: OuterArg,
    /// Use the thread pool for the dense linear algebra.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OuterArg {
    Newton,
    FixedPoint,
}

impl ModelArgs {
    fn config(&self, adaptive: bool) -> SmootherConfig {
        SmootherConfig {
            basis_dim: self.basis_dim,
            diff_order: self.diff_order,
            adaptive,
            adaptive_dim: [self.adaptive_dim; 3],
            inner_tol: self.inner_tol,
            outer_tol: self.outer_tol,
            max_inner: self.max_inner,
            max_outer: self.max_outer,
            outer_method: match self.outer_method {
                OuterArg::Newton => OuterMethod::Newton,
                OuterArg::FixedPoint => OuterMethod::FixedPoint,
            },
            execution: if self.parallel {
                Execution::Parallel
            } else {
                Execution::Sequential
            },
            ..SmootherConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Dataset with header r,c,t,count,n.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
    /// Use the locally adaptive penalty.
    #[arg(long)]
    adaptive: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Dataset with header r,c,t,count,n.
    #[arg(long)]
    input: PathBuf,
    /// Output directory; receives nonadaptive/, adaptive/ and compare.json.
    #[arg(long)]
    out: PathBuf,
    /// True rates (r,c,t,rate) for RMSE reporting.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Output truth table [default: truth.csv next to --out].
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Random seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Grid rows.
    #[arg(long, default_value_t = 16)]
    rows: usize,
    /// Grid columns.
    #[arg(long, default_value_t = 16)]
    cols: usize,
    /// Number of pre-spike times.
    #[arg(long, default_value_t = 16)]
    lags: usize,
    /// First pre-spike time in ms.
    #[arg(long, default_value_t = -20, allow_hyphen_values = true)]
    t0: i64,
    /// Spacing of pre-spike times in ms.
    #[arg(long, default_value_t = -20, allow_hyphen_values = true)]
    t_step: i64,
    /// Stimulus presentations per grid position.
    #[arg(long, default_value_t = 100)]
    presentations: u64,
    /// JSON file with truth parameters; replaces the truth flags below.
    #[arg(long, conflicts_with_all = TRUTH_FLAGS)]
    truth_spec: Option<PathBuf>,
    #[command(flatten)]
    truth_params: TruthArgs,
}

const TRUTH_FLAGS: [&str; 10] = [
    "baseline",
    "amplitude",
    "center_r",
    "center_c",
    "width_r",
    "width_c",
    "onset",
    "peak",
    "offset",
    "sharpness",
];

#[derive(Debug, Args)]
struct TruthArgs {
    /// Baseline firing rate per presentation.
    #[arg(long, default_value_t = TruthSpec::default().baseline)]
    baseline: f64,
    /// Peak rate above baseline at the receptive-field centre.
    #[arg(long, default_value_t = TruthSpec::default().amplitude)]
    amplitude: f64,
    /// Receptive-field centre row (1-based, fractional allowed).
    #[arg(long, default_value_t = TruthSpec::default().center_r)]
    center_r: f64,
    /// Receptive-field centre column (1-based, fractional allowed).
    #[arg(long, default_value_t = TruthSpec::default().center_c)]
    center_c: f64,
    /// Gaussian width along rows.
    #[arg(long, default_value_t = TruthSpec::default().width_r)]
    width_r: f64,
    /// Gaussian width along columns.
    #[arg(long, default_value_t = TruthSpec::default().width_c)]
    width_c: f64,
    /// Response onset in ms before the spike.
    #[arg(long, default_value_t = TruthSpec::default().onset_ms)]
    onset: f64,
    /// Response peak in ms before the spike.
    #[arg(long, default_value_t = TruthSpec::default().peak_ms)]
    peak: f64,
    /// Response offset in ms before the spike.
    #[arg(long, default_value_t = TruthSpec::default().offset_ms)]
    offset: f64,
    /// Steepness of the onset and offset per ms; 0 gives a flat window.
    #[arg(long, default_value_t = TruthSpec::default().sharpness)]
    sharpness: f64,
}

impl From<&TruthArgs> for TruthSpec {
    fn from(a: &TruthArgs) -> Self {
        TruthSpec {
            baseline: a.baseline,
            amplitude: a.amplitude,
            center_r: a.center_r,
            center_c: a.center_c,
            width_r: a.width_r,
            width_c: a.width_c,
            onset_ms: a.onset,
            peak_ms: a.peak,
            offset_ms: a.offset,
            sharpness: a.sharpness,
        }
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated integers, got '{s}'"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("'{p}' is not a non-negative integer"))?;
    }
    Ok(out)
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Converged,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    let text = e.to_string();
                    eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
                    ExitCode::from(1)
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(Outcome::Converged) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(message) => {
            eprintln!("error: {}", message.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run_fit(data: &RfDataset, cfg: &SmootherConfig, out: &Path) -> Result<FitResult, String> {
    let result = fit(data, cfg).map_err(|e| e.to_string())?;
    export_fit(&result, data.grid(), out).map_err(|e| e.to_string())?;
    if !result.converged {
        eprintln!(
            "warning: {} fit did not converge after {} outer iterations; bundle written to {}",
            if cfg.adaptive { "adaptive" } else { "non-adaptive" },
            result.trace.len(),
            out.display()
        );
    }
    Ok(result)
}

fn cmd_fit(args: &FitArgs) -> Result<Outcome, String> {
    let cfg = args.model.config(args.adaptive);
    cfg.validate().map_err(|e| e.to_string())?;
    let data = read_dataset(&args.input).map_err(|e| e.to_string())?;
    let result = run_fit(&data, &cfg, &args.out)?;
    Ok(if result.converged {
        Outcome::Converged
    } else {
        Outcome::NotConverged
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome, String> {
    let truth = match &args.truth_spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str::<TruthSpec>(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => TruthSpec::from(&args.truth_params),
    };
    truth.validate().map_err(|e| e.to_string())?;
    if args.presentations == 0 {
        return Err("presentations must be positive".into());
    }
    let grid = GridSpec::regular(args.rows, args.cols, args.lags, args.t0, args.t_step).map_err(|e| e.to_string())?;
    let offsets = OffsetGrid::constant(args.rows, args.cols, args.presentations);
    let counts = simulate_rfmap(&truth, &grid, &offsets, args.seed).map_err(|e| e.to_string())?;
    let data = RfDataset::new(counts, offsets).map_err(|e| e.to_string())?;
    let truth_path = args
        .truth
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("truth.csv"));
    if truth_path == args.out {
        return Err("dataset and truth table would overwrite each other".into());
    }
    for path in [&args.out, &truth_path] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
    }
    write_dataset(&data, &args.out).map_err(|e| e.to_string())?;
    write_truth(&truth, &grid, &truth_path).map_err(|e| e.to_string())?;
    Ok(Outcome::Converged)
}

#[derive(Debug, Serialize)]
struct FitComparison {
    converged: bool,
    outer_iterations: usize,
    parameters: usize,
    deviance: f64,
    ed_total: f64,
    reml: f64,
    wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rmse: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    nonadaptive: FitComparison,
    adaptive: FitComparison,
}

fn summarize(result: &FitResult, truth: Option<&[f64]>) -> FitComparison {
    let rmse = truth.map(|t| {
        let rate = result.fitted_rate.as_slice();
        let sse: f64 = rate.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        (sse / rate.len() as f64).sqrt()
    });
    FitComparison {
        converged: result.converged,
        outer_iterations: result.trace.len(),
        parameters: result.parameter_count(),
        deviance: result.deviance,
        ed_total: result.total_ed,
        reml: result.reml,
        wall_seconds: result.wall_seconds,
        rmse,
    }
}

fn cmd_compare(args: &CompareArgs) -> Result<Outcome, String> {
    let nonadaptive = args.model.config(false);
    let adaptive = args.model.config(true);
    nonadaptive.validate().map_err(|e| e.to_string())?;
    adaptive.validate().map_err(|e| e.to_string())?;
    let data = read_dataset(&args.input).map_err(|e| e.to_string())?;
    let truth = match &args.truth {
        Some(path) => Some(read_truth(path, data.grid()).map_err(|e| e.to_string())?),
        None => None,
    };
    let a = run_fit(&data, &nonadaptive, &args.out.join("nonadaptive"))?;
    let b = run_fit(&data, &adaptive, &args.out.join("adaptive"))?;
    let comparison = Comparison {
        nonadaptive: summarize(&a, truth.as_deref()),
        adaptive: summarize(&b, truth.as_deref()),
    };
    let path = args.out.join("compare.json");
    let json = serde_json::to_string_pretty(&comparison).map_err(|e| e.to_string())?;
    fs::write(&path, json + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(if a.converged && b.converged {
        Outcome::Converged
    } else {
        Outcome::NotConverged
    })
}

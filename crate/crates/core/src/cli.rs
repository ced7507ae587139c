//! Command-line front end. [`main_with`] does all the work so tests can call
//! it in-process; the binary only forwards `std::env::args`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aggregate::AggregatorSpec;
use crate::baselines::{BlTask, WaggProxy};
use crate::bench::{
    candidate_sets, load_labels_csv, load_scores_csv, metrics, run_experiment, CandidateEval, ExperimentConfig, Method,
    MethodParams,
};
use crate::error::{Error, Result};
use crate::primitives::{Alpha, TestScoreProfile};
use crate::sacp::PGrid;
use crate::validate::{
    check_quantile_lemma, check_rank_uniformity, check_rho_invariance, check_worst_case_bound, BoundParams, Report,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INGESTION: i32 = 3;

/// Scale applied to test scores by `validate uniformity --negative-control`.
const NEGATIVE_CONTROL_SCALE: f64 = 1.5;

#[derive(Debug, Parser)]
#[command(name = "sacp", version, about = "Conformal prediction sets from several predictors")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment config and write results.csv and summary.json.
    Run(RunArgs),
    /// Run Monte-Carlo checks of the theory; exits 1 if any check fails.
    Validate(ValidateArgs),
    /// Print prediction sets for precomputed score files.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    config: PathBuf,
    /// Significance level(s), overriding the config.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Base seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Exponent grid for sacp++, as `lo:hi:count[:noext]`.
    #[arg(long, allow_hyphen_values = true)]
    p_grid: Option<String>,
    /// Output directory (default: the config's, else `results`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock time per method.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Uniformity,
    Lemma,
    Bound,
    Rho,
    All,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Aggregator for the bound check.
    #[arg(long)]
    aggregator: Option<String>,
    /// Break exchangeability in the uniformity check; it is then expected to fail.
    #[arg(long)]
    negative_control: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Calibration scores: one column per model.
    #[arg(long)]
    calib: PathBuf,
    /// Test scores: test_id, candidate, then one column per model.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "sacp")]
    method: String,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// `test_id,label` file; adds a coverage summary line.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, allow_hyphen_values = true)]
    p_grid: Option<String>,
}

/// Exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_ingestion() {
        EXIT_INGESTION
    } else {
        EXIT_CONFIG
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn main_with<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(cli.command, out))),
        None => dispatch(cli.command, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut (dyn Write + Send)) -> Result<i32> {
    match command {
        Command::Run(args) => cmd_run(args, out),
        Command::Validate(args) => cmd_validate(args, out),
        Command::Predict(args) => cmd_predict(args, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io { path: "<stdout>".into(), source: e }
}

fn cmd_run(args: RunArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let mut cfg = ExperimentConfig::from_json_file(&args.config)?;
    if !args.alpha.is_empty() {
        cfg.alphas = args.alpha;
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(g) = args.grid_size {
        cfg.grid_size = g;
    }
    if !args.methods.is_empty() {
        cfg.methods = args.methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    }
    if let Some(p) = &args.p_grid {
        cfg.params.p_grid = Some(p.parse()?);
    }
    if args.timing {
        cfg.timing = true;
    }
    let dir = args.out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| "results".into());
    cfg.validate()?;
    let result = run_experiment(&cfg)?;
    let (csv, json) = result.write(&dir)?;
    for row in &result.summary {
        writeln!(
            out,
            "{} alpha={} coverage={:.4} avg_length={:.4}",
            row.method, row.alpha, row.coverage.mean, row.avg_length.mean
        )
        .map_err(io_err)?;
    }
    writeln!(out, "wrote {} and {}", csv.display(), json.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn cmd_validate(args: ValidateArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let suites = match args.suite {
        Suite::All => vec![Suite::Uniformity, Suite::Lemma, Suite::Bound, Suite::Rho],
        s => vec![s],
    };
    let mut reports: Vec<Report> = Vec::new();
    for suite in suites {
        let report = match suite {
            Suite::Uniformity => {
                let scale = if args.negative_control { NEGATIVE_CONTROL_SCALE } else { 1.0 };
                check_rank_uniformity(
                    args.n.unwrap_or(20),
                    args.k.unwrap_or(3),
                    args.trials.unwrap_or(20000),
                    scale,
                    args.seed,
                )?
            }
            Suite::Lemma => check_quantile_lemma(
                args.trials.unwrap_or(1000),
                args.n.unwrap_or(50),
                args.k.unwrap_or(4),
                args.alpha.unwrap_or(0.2),
                args.seed,
            )?,
            Suite::Bound => {
                let mut p = BoundParams::new(
                    args.trials.unwrap_or(200),
                    args.n.unwrap_or(200),
                    args.k.unwrap_or(3),
                    args.alpha.unwrap_or(0.1),
                    args.seed,
                );
                if let Some(g) = args.grid_size {
                    p.grid_size = g;
                }
                if let Some(a) = &args.aggregator {
                    p.spec = a.parse::<AggregatorSpec>()?;
                }
                check_worst_case_bound(p)?
            }
            Suite::Rho => check_rho_invariance(args.trials.unwrap_or(1000), args.seed)?,
            Suite::All => unreachable!(),
        };
        reports.push(report);
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&reports)?).map_err(io_err)?;
    Ok(if reports.iter().all(|r| r.pass) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_predict(args: PredictArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let method: Method = args.method.parse()?;
    let alpha = Alpha::new(args.alpha)?;
    let params = MethodParams {
        p_grid: args.p_grid.as_deref().map(str::parse::<PGrid>).transpose()?,
        ..MethodParams::default()
    };
    let data = load_scores_csv(&args.calib, &args.test)?;
    let truth = match &args.labels {
        None => None,
        Some(path) => {
            let map = load_labels_csv(path)?;
            let idx = data
                .tests
                .iter()
                .map(|t| {
                    let label = map
                        .get(&t.id)
                        .ok_or_else(|| Error::ingestion(path, format!("no label for test point '{}'", t.id)))?;
                    // A label outside the candidate list counts as not covered.
                    Ok(t.candidates.iter().position(|c| c == label))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(idx)
        }
    };
    let tests: Vec<Vec<TestScoreProfile>> = data.tests.iter().map(|t| t.profiles.clone()).collect();
    let eval = CandidateEval {
        calib: &data.calib,
        tests: &tests,
        truth: None,
        bl_task: BlTask::Regression,
        wagg_proxy: WaggProxy::Regression,
    };
    let sets = candidate_sets(eval, method, alpha, &params, args.seed)?;
    for (point, set) in data.tests.iter().zip(&sets) {
        let accepted: Vec<&str> = point
            .candidates
            .iter()
            .zip(set)
            .filter(|(_, &a)| a)
            .map(|(c, _)| c.as_str())
            .collect();
        writeln!(out, "{}: {}", point.id, accepted.join(" ")).map_err(io_err)?;
    }
    if let Some(truth) = truth {
        let covered: Vec<bool> = sets.iter().zip(&truth).map(|(s, t)| t.is_some_and(|t| s[t])).collect();
        let lengths: Vec<f64> = sets.iter().map(|s| s.iter().filter(|&&a| a).count() as f64).collect();
        let (coverage, avg_length) = metrics(&covered, &lengths)?;
        writeln!(out, "coverage={coverage},avg_length={avg_length}").map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

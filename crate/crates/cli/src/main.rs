//! Batch front end for the portfolio solvers.
//!
//! Four subcommands: `solve` optimizes one instance from a returns CSV or
//! an OR-Library moment file and emits a result JSON; `backtest` rolls a
//! training window over a returns history; `bench` sweeps (k, κ2, γ) over
//! a seeded synthetic instance and prints objective/gap/time/cuts/nodes
//! rows; `verify` cross-checks the cutting-plane solver against exhaustive
//! enumeration on seeded instances.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 solver failure or a
//! failed verification, 3 time limit reached with a valid incumbent.
//! Failures are reported as one JSON object on stderr.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};

use drpo::backtest::{rolling_backtest, BacktestConfig, Strategy};
use drpo::data_io::{parse_orlibrary, parse_returns_csv, write_result_json};
use drpo::lower_level::solve_lower;
use drpo::model::{build_utility_tangents, estimate_moments, Instance, UncertaintySet};
use drpo::synthetic::{default_utility, random_moments};
use drpo::upper_level::{cutting_plane_solve, CutPlaneConfig, MasterMode, TraceRecord};
use drpo::{LowerLevelError, Moments, Selection, SolveResult, Termination, UpperLevelError};

#[derive(Parser)]
#[command(
    name = "drpo",
    about = "Cardinality-constrained robust portfolio optimization",
    version
)]
struct RunConfig {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and write a result JSON
    Solve(SolveArgs),
    /// Rolling-window out-of-sample evaluation over a returns history
    Backtest(BacktestArgs),
    /// Sweep (k, kappa2, gamma) on a seeded synthetic instance
    Bench(BenchArgs),
    /// Check the solver against exhaustive enumeration on seeded instances
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Returns history CSV: header row of asset labels, first column a
    /// period key; columns with missing cells are dropped whole
    #[arg(long, value_name = "PATH")]
    returns: Option<PathBuf>,
    /// OR-Library moment file: asset count, mean/sd lines, correlation
    /// triplets
    #[arg(long, value_name = "PATH")]
    orlibrary: Option<PathBuf>,
    /// Factor applied to OR-Library means
    #[arg(long, default_value_t = 100.0)]
    mean_scale: f64,
    /// Factor applied to OR-Library covariances
    #[arg(long, default_value_t = 10000.0)]
    cov_scale: f64,
}

#[derive(Args)]
struct RobustModelArgs {
    /// Mean-ellipsoid radius
    #[arg(long, default_value_t = 1.0)]
    kappa1: f64,
    /// Second-moment factor
    #[arg(long, default_value_t = 4.0)]
    kappa2: f64,
    /// Utility curvature
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// Tangent touch points as comma-separated fractions of the largest
    /// mean
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    tangents: Vec<f64>,
    /// Regularization weight, taken as given
    #[arg(long, conflicts_with = "gamma_scaled")]
    gamma: Option<f64>,
    /// Convenience form G meaning gamma = G/sqrt(N); default 10
    #[arg(long)]
    gamma_scaled: Option<f64>,
}

impl RobustModelArgs {
    fn gamma_for(&self, n: usize) -> f64 {
        match (self.gamma, self.gamma_scaled) {
            (Some(g), _) => g,
            (None, Some(scaled)) => scaled / (n as f64).sqrt(),
            (None, None) => 10.0 / (n as f64).sqrt(),
        }
    }

    fn instance(&self, moments: Moments, k: usize) -> Result<Instance, Failure> {
        let n = moments.mean().len();
        let mu_max = moments.mu_max();
        let points: Vec<f64> = self.tangents.iter().map(|f| f * mu_max).collect();
        let utility = build_utility_tangents(mu_max, self.alpha, &points)
            .map_err(|e| Failure::Validation(e.to_string()))?;
        Ok(Instance {
            ambiguity: UncertaintySet {
                kappa1: self.kappa1,
                kappa2: self.kappa2,
            },
            utility,
            gamma: self.gamma_for(n),
            moments,
            k,
        })
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Terminate when the bound gap is within this
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Wall-clock budget in seconds (env DRPO_TIME_LIMIT overrides)
    #[arg(long, default_value_t = 3600.0)]
    time_limit: f64,
    /// Master strategy: "single-tree" or "iterative"
    #[arg(long, default_value = "single-tree", value_parser = MasterMode::from_str)]
    mode: MasterMode,
    /// Worker threads (env DRPO_WORKERS overrides); reserved — solves
    /// currently run single-threaded and deterministic
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl SolverArgs {
    fn config(&self) -> Result<CutPlaneConfig, Failure> {
        let time_limit = match std::env::var("DRPO_TIME_LIMIT") {
            Ok(v) => v.parse::<f64>().map_err(|_| {
                Failure::Validation(format!("DRPO_TIME_LIMIT {v:?} is not a number of seconds"))
            })?,
            Err(_) => self.time_limit,
        };
        let workers = match std::env::var("DRPO_WORKERS") {
            Ok(v) => v.parse::<usize>().map_err(|_| {
                Failure::Validation(format!("DRPO_WORKERS {v:?} is not a worker count"))
            })?,
            Err(_) => self.workers,
        };
        if workers < 1 {
            return Err(Failure::Validation("worker count must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Failure::Validation(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(time_limit >= 0.0) {
            return Err(Failure::Validation(format!(
                "time limit must be nonnegative seconds, got {time_limit}"
            )));
        }
        Ok(CutPlaneConfig {
            epsilon: self.epsilon,
            time_limit: Duration::from_secs_f64(time_limit),
            mode: self.mode,
            ..CutPlaneConfig::default()
        })
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Number of assets to select
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    model: RobustModelArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write per-evaluation trace records as JSON lines
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Result JSON path; stdout when omitted
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BacktestArgs {
    /// Returns history CSV (the only source a backtest accepts)
    #[arg(long, value_name = "PATH")]
    returns: PathBuf,
    /// Number of assets to select
    #[arg(long)]
    k: usize,
    /// Portfolio strategy: "dr" (worst-case loss) or "mv" (mean-variance)
    #[arg(long, default_value = "dr", value_parser = parse_strategy_name)]
    strategy: StrategyName,
    #[command(flatten)]
    model: RobustModelArgs,
    /// Mean-variance return target; lower quartile of each training
    /// window's means when omitted
    #[arg(long)]
    required_return: Option<f64>,
    /// Mean-variance ridge term
    #[arg(long)]
    gamma_mv: Option<f64>,
    /// Training periods per window
    #[arg(long, default_value_t = 156)]
    train: usize,
    /// Testing periods per window
    #[arg(long, default_value_t = 52)]
    test: usize,
    /// Periods the window advances between rebalances
    #[arg(long, default_value_t = 52)]
    step: usize,
    #[command(flatten)]
    solver: SolverArgs,
    /// Report JSON path; stdout when omitted
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Also write realized per-period returns as CSV
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum StrategyName {
    Dr,
    Mv,
}

fn parse_strategy_name(s: &str) -> Result<StrategyName, String> {
    match s {
        "dr" => Ok(StrategyName::Dr),
        "mv" => Ok(StrategyName::Mv),
        other => Err(format!("unknown strategy {other:?}: expected \"dr\" or \"mv\"")),
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Seed of the synthetic instance
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Universe size
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Cardinalities to sweep
    #[arg(long, value_delimiter = ',', default_value = "2,5")]
    k: Vec<usize>,
    /// Second-moment factors to sweep
    #[arg(long, value_delimiter = ',', default_value = "4")]
    kappa2: Vec<f64>,
    /// Gamma-scaled values to sweep (gamma = G/sqrt(N))
    #[arg(long, value_delimiter = ',', default_value = "10")]
    gamma_scaled: Vec<f64>,
    /// Mean-ellipsoid radius
    #[arg(long, default_value_t = 1.0)]
    kappa1: f64,
    /// Utility curvature
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// Tangent pieces
    #[arg(long, default_value_t = 3)]
    pieces: usize,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Base seed; instance i uses seed + i
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Universe size
    #[arg(long, default_value_t = 7)]
    n: usize,
    /// Cardinality
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// How many seeded instances to check
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Tangent pieces
    #[arg(long, default_value_t = 3)]
    pieces: usize,
    /// Agreement tolerance against enumeration
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[command(flatten)]
    solver: SolverArgs,
}

enum Failure {
    Validation(String),
    Solver(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Solver(_) => "solver",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Solver(m) => m,
        }
    }

    fn exit(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Solver(_) => 2,
        }
    }
}

/// Model-data problems are the caller's input; everything else is ours.
fn classify(err: UpperLevelError) -> Failure {
    match &err {
        UpperLevelError::Lower(LowerLevelError::Model(_)) => Failure::Validation(err.to_string()),
        _ => Failure::Solver(err.to_string()),
    }
}

fn io_failure(path: &PathBuf, err: impl Display) -> Failure {
    Failure::Validation(format!("{}: {err}", path.display()))
}

fn main() -> ExitCode {
    let config = match RunConfig::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let failure = Failure::Validation(e.to_string());
            report_failure(&failure);
            return ExitCode::from(failure.exit());
        }
    };
    match run(config) {
        Ok(code) => code,
        Err(failure) => {
            report_failure(&failure);
            ExitCode::from(failure.exit())
        }
    }
}

fn report_failure(failure: &Failure) {
    eprintln!(
        "{}",
        serde_json::json!({ "kind": failure.kind(), "error": failure.message() })
    );
}

fn run(config: RunConfig) -> Result<ExitCode, Failure> {
    match config.command {
        Command::Solve(args) => run_solve(args),
        Command::Backtest(args) => run_backtest(args),
        Command::Bench(args) => run_bench(args),
        Command::Verify(args) => run_verify(args),
    }
}

fn load_moments(source: &SourceArgs) -> Result<Moments, Failure> {
    match (&source.returns, &source.orlibrary) {
        (Some(path), None) => {
            let file = File::open(path).map_err(|e| io_failure(path, e))?;
            let (matrix, _dropped) =
                parse_returns_csv(file).map_err(|e| io_failure(path, e))?;
            estimate_moments(&matrix).map_err(|e| Failure::Validation(e.to_string()))
        }
        (None, Some(path)) => {
            let file = File::open(path).map_err(|e| io_failure(path, e))?;
            parse_orlibrary(file, source.mean_scale, source.cov_scale)
                .map_err(|e| io_failure(path, e))
        }
        (Some(_), Some(_)) => Err(Failure::Validation(
            "--returns and --orlibrary are mutually exclusive".into(),
        )),
        (None, None) => Err(Failure::Validation(
            "an instance source is required: --returns or --orlibrary".into(),
        )),
    }
}

fn write_result(result: &SolveResult, output: Option<&PathBuf>) -> Result<(), Failure> {
    match output {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_failure(path, e))?;
            write_result_json(result, BufWriter::new(file)).map_err(|e| io_failure(path, e))
        }
        None => write_result_json(result, std::io::stdout().lock())
            .map_err(|e| Failure::Solver(format!("stdout: {e}"))),
    }
}

fn exit_for(termination: Termination) -> ExitCode {
    match termination {
        Termination::EpsOptimal => ExitCode::SUCCESS,
        Termination::TimeLimit => ExitCode::from(3),
        Termination::IterLimit => ExitCode::from(2),
    }
}

fn run_solve(args: SolveArgs) -> Result<ExitCode, Failure> {
    let moments = load_moments(&args.source)?;
    let instance = args.model.instance(moments, args.k)?;
    let config = args.solver.config()?;

    let mut records: Vec<TraceRecord> = Vec::new();
    let mut sink = |r: &TraceRecord| records.push(r.clone());
    let trace_requested = args.trace.is_some();
    let result = cutting_plane_solve(
        &instance,
        &config,
        trace_requested.then_some(&mut sink as &mut dyn FnMut(&TraceRecord)),
    )
    .map_err(classify)?;

    if let Some(path) = &args.trace {
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        let mut out = BufWriter::new(file);
        for record in &records {
            serde_json::to_writer(&mut out, record).map_err(|e| io_failure(path, e))?;
            out.write_all(b"\n").map_err(|e| io_failure(path, e))?;
        }
        out.flush().map_err(|e| io_failure(path, e))?;
    }
    write_result(&result, args.output.as_ref())?;
    Ok(exit_for(result.termination))
}

fn run_backtest(args: BacktestArgs) -> Result<ExitCode, Failure> {
    let file = File::open(&args.returns).map_err(|e| io_failure(&args.returns, e))?;
    let (matrix, _dropped) =
        parse_returns_csv(file).map_err(|e| io_failure(&args.returns, e))?;
    let strategy = match args.strategy {
        StrategyName::Dr => {
            let n_probe = matrix.n_assets();
            Strategy::Robust {
                k: args.k,
                // Per-window gamma follows the same G/sqrt(N) rule; the
                // asset count is fixed across windows, so resolve G here.
                gamma_scaled: args.model.gamma_for(n_probe) * (n_probe as f64).sqrt(),
                kappa1: args.model.kappa1,
                kappa2: args.model.kappa2,
                alpha: args.model.alpha,
                tangent_fractions: args.model.tangents.clone(),
            }
        }
        StrategyName::Mv => Strategy::MeanVariance {
            k: args.k,
            required_return: args.required_return,
            gamma_mv: args.gamma_mv,
        },
    };
    let config = BacktestConfig {
        train_len: args.train,
        test_len: args.test,
        step: args.step,
        strategy,
        solver: args.solver.config()?,
    };
    let report =
        rolling_backtest(&matrix, &config).map_err(|e| Failure::Validation(e.to_string()))?;

    if let Some(path) = &args.csv {
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "window,period,return").map_err(|e| io_failure(path, e))?;
        for (w, record) in report.windows.iter().enumerate() {
            for p in 0..config.test_len {
                writeln!(
                    out,
                    "{w},{},{}",
                    record.test_start + p,
                    report.returns[w * config.test_len + p]
                )
                .map_err(|e| io_failure(path, e))?;
            }
        }
        out.flush().map_err(|e| io_failure(path, e))?;
    }

    let json = serde_json::to_string(&report)
        .map_err(|e| Failure::Solver(format!("report serialization: {e}")))?;
    match &args.output {
        Some(path) => {
            let mut file = File::create(path).map_err(|e| io_failure(path, e))?;
            writeln!(file, "{json}").map_err(|e| io_failure(path, e))?;
        }
        None => println!("{json}"),
    }
    if report.partial {
        return Err(Failure::Solver(
            report
                .failure
                .unwrap_or_else(|| "a window failed without a recorded cause".into()),
        ));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_bench(args: BenchArgs) -> Result<ExitCode, Failure> {
    let config = args.solver.config()?;
    let moments = random_moments(args.seed, args.n);
    let utility = default_utility(&moments, args.alpha, args.pieces);
    println!(
        "{:>4} {:>4} {:>8} {:>10} {:>12} {:>9} {:>9} {:>7} {:>8}",
        "n", "k", "kappa2", "gamma", "Obj", "Gap(%)", "Time", "#Cuts", "#Nodes"
    );
    for &k in &args.k {
        for &kappa2 in &args.kappa2 {
            for &scaled in &args.gamma_scaled {
                let instance = Instance {
                    moments: moments.clone(),
                    ambiguity: UncertaintySet {
                        kappa1: args.kappa1,
                        kappa2,
                    },
                    utility: utility.clone(),
                    gamma: scaled / (args.n as f64).sqrt(),
                    k,
                };
                let result = cutting_plane_solve(&instance, &config, None).map_err(classify)?;
                let gap_pct = 100.0 * result.gap / result.objective.abs().max(1e-12);
                println!(
                    "{:>4} {:>4} {:>8} {:>10.6} {:>12.6} {:>9.4} {:>9.3} {:>7} {:>8}",
                    args.n,
                    k,
                    kappa2,
                    instance.gamma,
                    result.objective,
                    gap_pct,
                    result.wall_time_s,
                    result.cuts,
                    result.nodes
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn walk(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            walk(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    walk(0, n, k, &mut cur, &mut out);
    out
}

fn run_verify(args: VerifyArgs) -> Result<ExitCode, Failure> {
    let config = args.solver.config()?;
    let supports = combinations(args.n, args.k);
    let mut matched = 0usize;
    for i in 0..args.instances {
        let seed = args.seed + i as u64;
        let instance = drpo::synthetic::random_instance(seed, args.n, args.k, args.pieces);

        let mut best = f64::INFINITY;
        for indices in &supports {
            let sel = Selection::from_indices(args.n, indices)
                .expect("enumerated indices are in range");
            let f = solve_lower(&instance, &sel, &config.ipm)
                .map_err(|e| Failure::Solver(e.to_string()))?
                .f_prime;
            best = best.min(f);
        }

        let mut records: Vec<TraceRecord> = Vec::new();
        let mut sink = |r: &TraceRecord| records.push(r.clone());
        let result = cutting_plane_solve(
            &instance,
            &config,
            Some(&mut sink as &mut dyn FnMut(&TraceRecord)),
        )
        .map_err(classify)?;

        let agree = (result.objective - best).abs() <= args.tolerance;
        let ledger_ok = records.windows(2).all(|p| {
            p[1].ub <= p[0].ub + 1e-12 && p[1].lb >= p[0].lb - 1e-7
        }) && result.gap <= config.epsilon + 1e-9
            && result.cuts <= supports.len();
        let verdict = if agree && ledger_ok { "pass" } else { "FAIL" };
        println!(
            "instance {i} (seed {seed}): solver {:.8}, enumeration {best:.8}, gap {:.2e}, \
             cuts {}/{}, ledger {} — {verdict}",
            result.objective,
            result.gap,
            result.cuts,
            supports.len(),
            if ledger_ok { "ok" } else { "violated" }
        );
        if agree && ledger_ok {
            matched += 1;
        }
    }
    println!(
        "{matched}/{} matched within {:.0e}",
        args.instances, args.tolerance
    );
    if matched == args.instances {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::Solver(format!(
            "{} of {} instances disagreed with enumeration",
            args.instances - matched,
            args.instances
        )))
    }
}

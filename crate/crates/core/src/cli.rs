//! The `sympulse` command line: tableau inspection, integration, convergence
//! studies and the g(α, h) level grid.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::conserve::{level_grid, AlphaStrategy};
use crate::error::Error;
use crate::experiments::{
    convergence_table, integrate, write_convergence_csv, write_header, write_levelmap_csv, write_trajectory_csv, Method,
    Reference, RunSpec,
};
use crate::problems::Problem;
use crate::stepper::{StageSolver, StepConfig};
use crate::tableau::MethodFamily;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "SYMPULSE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sympulse", version, about = "Energy-preserving symplectic perturbations of Gauss collocation methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the Butcher tableau A(α), c, b.
    Tableau(TableauArgs),
    /// Integrate one problem and write the trajectory.
    Integrate(IntegrateArgs),
    /// Global error and α* spread over a list of stepsizes.
    Converge(ConvergeArgs),
    /// Evaluate g(α, h) over a grid at the initial state.
    Levelmap(LevelmapArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    FixedPoint,
    SimplifiedNewton,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Bisection,
    Secant,
}

#[derive(Debug, Args)]
struct TableauArgs {
    #[arg(long)]
    stages: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha: f64,
    /// Perturbed subdiagonal pair; defaults to the last one (s-1).
    #[arg(long)]
    perturb_index: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value = "kepler")]
    problem: String,
    /// Kepler eccentricity.
    #[arg(long, default_value_t = 0.6)]
    e: f64,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    y0: Option<Vec<f64>>,
    #[arg(long, default_value = "ep-gauss")]
    method: String,
    /// α for `--method fixed-alpha`.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long)]
    perturb_index: Option<usize>,
    /// End of the interval; 500 for henon-heiles, 10 for harmonic, else 50.
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long, default_value_t = 1e-14)]
    stage_tol: f64,
    #[arg(long, value_enum, default_value_t = SolverArg::FixedPoint)]
    stage_solver: SolverArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Bisection)]
    alpha_strategy: StrategyArg,
    #[arg(long, default_value_t = 1e-13)]
    g_tol: f64,
    #[arg(long)]
    bracket_seed: Option<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IntegrateArgs {
    #[command(flatten)]
    common: Common,
    /// Stepsize, decimal or `2^-k`; 0.25 for henon-heiles, else 2^-5.
    #[arg(long)]
    h: Option<String>,
}

#[derive(Debug, Args)]
struct ConvergeArgs {
    #[command(flatten)]
    common: Common,
    /// `2^-a:2^-b` for all powers of two in between, or a comma list.
    #[arg(long, default_value = "2^-1:2^-7")]
    h_list: String,
}

#[derive(Debug, Args)]
struct LevelmapArgs {
    #[command(flatten)]
    common: Common,
    /// `lo:hi:n`, n evenly spaced stepsizes.
    #[arg(long, default_value = "0.01:0.2:20")]
    h_range: String,
    /// `lo:hi:n`, n evenly spaced values of α.
    #[arg(long, default_value = "-0.5e-3:4e-3:46", allow_hyphen_values = true)]
    alpha_range: String,
}

/// Failure of a CLI run, mapped onto an exit code.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(#[from] Error),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }
}

type Header = Vec<(String, String)>;

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(stderr, "{text}") } else { write!(stdout, "{text}") };
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        let _ = writeln!(stderr, "error: {e}");
        return e.exit_code();
    }
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    // A global pool that already exists (repeated in-process runs) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Tableau(args) => tableau_command(args, stdout),
        Command::Integrate(args) => integrate_command(args, stdout),
        Command::Converge(args) => converge_command(args, stdout),
        Command::Levelmap(args) => levelmap_command(args, stdout),
    }
}

#[derive(Serialize)]
struct TableauJson {
    stages: usize,
    alpha: f64,
    perturb_index: Option<usize>,
    order: usize,
    c: Vec<f64>,
    b: Vec<f64>,
    a: Vec<Vec<f64>>,
}

fn tableau_command(args: TableauArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let s = args.stages;
    if s == 0 {
        return Err(CliError::Usage("--stages must be at least 1".into()));
    }
    if !args.alpha.is_finite() {
        return Err(CliError::Usage("--alpha must be finite".into()));
    }
    let index = match args.perturb_index {
        Some(j) => Some(j),
        None if s > 1 => Some(s - 1),
        None if args.alpha != 0.0 => return Err(CliError::Usage("a 1-stage tableau has no α to perturb".into())),
        None => None,
    };
    let tableau = MethodFamily::new(s, index).map_err(usage)?.tableau(args.alpha);
    let (c, b) = (&tableau.quadrature.c, &tableau.quadrature.b);
    let text = match args.format {
        Format::Json => {
            let json = TableauJson {
                stages: s,
                alpha: args.alpha,
                perturb_index: index,
                order: tableau.order,
                c: c.clone(),
                b: b.clone(),
                a: (0..s).map(|i| (0..s).map(|j| tableau.a[(i, j)]).collect()).collect(),
            };
            let mut text = serde_json::to_string_pretty(&json).expect("tableau serializes");
            text.push('\n');
            text
        }
        Format::Csv => {
            let mut buf = Vec::new();
            let header = vec![
                kv("stages", s),
                kv("alpha", num(args.alpha)),
                kv("perturb_index", index.map_or("none".into(), |j| j.to_string())),
                kv("order", tableau.order),
            ];
            write_header(&mut buf, &header).expect("in-memory write");
            let cols: Vec<String> = (1..=s).map(|j| format!("A_i{j}")).collect();
            writeln!(buf, "i,c,b,{}", cols.join(",")).expect("in-memory write");
            for i in 0..s {
                let row: Vec<String> = (0..s).map(|j| format!("{:.16e}", tableau.a[(i, j)])).collect();
                writeln!(buf, "{},{:.16e},{:.16e},{}", i + 1, c[i], b[i], row.join(",")).expect("in-memory write");
            }
            String::from_utf8(buf).expect("ascii output")
        }
    };
    emit(args.output.as_deref(), text.as_bytes(), stdout)
}

fn integrate_command(args: IntegrateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let problem = parse_problem(&args.common)?;
    let h = match &args.h {
        Some(text) => parse_stepsize(text)?,
        None if problem == Problem::HenonHeiles => 0.25,
        None => 0.5f64.powi(5),
    };
    let spec = build_spec(&args.common, problem, h)?;
    let record = integrate(&spec)?;
    let mut header = common_header("integrate", &args.common, &spec)?;
    header.push(kv("h", num(h)));
    header.push(kv("steps", record.rows.len() - 1));
    header.push(kv("max_H_err", format!("{:.16e}", record.max_energy_error())));
    let mut buf = Vec::new();
    write_header(&mut buf, &header).expect("in-memory write");
    write_trajectory_csv(&mut buf, &record).expect("in-memory write");
    emit(args.common.output.as_deref(), &buf, stdout)
}

fn converge_command(args: ConvergeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let problem = parse_problem(&args.common)?;
    let h_list = parse_h_list(&args.h_list)?;
    let spec = build_spec(&args.common, problem, h_list[0])?;
    let table = convergence_table(&spec, &h_list)?;
    let mut header = common_header("converge", &args.common, &spec)?;
    header.push(kv("h_list", join(&h_list)));
    header.push(kv("norm", "euclidean"));
    header.push(kv(
        "reference",
        match table.reference {
            Reference::KeplerExact => "kepler-exact".to_string(),
            Reference::FineGauss { h, agreement } => format!("gauss-s3 h={} agreement={agreement:e}", num(h)),
        },
    ));
    header.push(kv("delta_scaled", table.delta_power.map_or("none".into(), |p| format!("delta_h/h^{p}"))));
    let mut buf = Vec::new();
    write_header(&mut buf, &header).expect("in-memory write");
    write_convergence_csv(&mut buf, &table).expect("in-memory write");
    emit(args.common.output.as_deref(), &buf, stdout)
}

fn levelmap_command(args: LevelmapArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let problem = parse_problem(&args.common)?;
    let h_values = parse_range(&args.h_range, "--h-range")?;
    if h_values.iter().any(|&h| !(h > 0.0)) {
        return Err(CliError::Usage("--h-range must be positive".into()));
    }
    let alpha_values = parse_range(&args.alpha_range, "--alpha-range")?;
    let spec = build_spec(&args.common, problem, h_values[0])?;
    let index = spec
        .method
        .perturb_index(spec.stages, spec.perturb_index)
        .map_err(usage)?
        .ok_or_else(|| CliError::Usage("levelmap needs a perturbed method".into()))?;
    let (system, ic) = problem.build().map_err(usage)?;
    let y0 = spec.y0.clone().unwrap_or(ic.y0);
    if y0.len() != system.dim() {
        return Err(CliError::Usage(format!("--y0 needs {} components", system.dim())));
    }
    let grid = level_grid(system.as_ref(), spec.stages, index, &y0, &h_values, &alpha_values, &spec.step)?;
    let mut header = common_header("levelmap", &args.common, &spec)?;
    header.push(kv("h_range", &args.h_range));
    header.push(kv("alpha_range", &args.alpha_range));
    header.push(kv("failed_cells", grid.failures.len()));
    let mut buf = Vec::new();
    write_header(&mut buf, &header).expect("in-memory write");
    write_levelmap_csv(&mut buf, &grid).expect("in-memory write");
    emit(args.common.output.as_deref(), &buf, stdout)
}

fn parse_problem(common: &Common) -> Result<Problem, CliError> {
    Problem::parse(&common.problem, common.e).map_err(usage)
}

fn default_t_end(problem: Problem) -> f64 {
    match problem {
        Problem::HenonHeiles => 500.0,
        Problem::Harmonic => 10.0,
        _ => 50.0,
    }
}

fn build_spec(common: &Common, problem: Problem, h: f64) -> Result<RunSpec, CliError> {
    let method = Method::parse(&common.method, common.alpha).map_err(usage)?;
    if common.alpha.is_some() && !matches!(method, Method::FixedAlpha(_)) {
        return Err(CliError::Usage("--alpha only applies to --method fixed-alpha".into()));
    }
    let t_end = common.t_end.unwrap_or_else(|| default_t_end(problem));
    let mut spec = RunSpec::new(problem, method, common.stages, h, t_end);
    spec.y0 = common.y0.clone();
    spec.perturb_index = common.perturb_index;
    spec.step = StepConfig {
        stage_tol: common.stage_tol,
        solver: match common.stage_solver {
            SolverArg::FixedPoint => StageSolver::FixedPoint,
            SolverArg::SimplifiedNewton => StageSolver::SimplifiedNewton,
        },
        ..StepConfig::new(h)
    };
    spec.search.strategy = match common.alpha_strategy {
        StrategyArg::Bisection => AlphaStrategy::Bisection,
        StrategyArg::Secant => AlphaStrategy::Secant,
    };
    spec.search.g_tol = common.g_tol;
    spec.search.bracket_seed = common.bracket_seed;
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn common_header(command: &str, common: &Common, spec: &RunSpec) -> Result<Header, CliError> {
    let index = spec.method.perturb_index(spec.stages, spec.perturb_index).map_err(usage)?;
    let mut header = vec![kv("command", command), kv("problem", spec.problem.name())];
    if let Problem::Kepler { e } = spec.problem {
        header.push(kv("e", num(e)));
    }
    if let Some(y0) = &spec.y0 {
        header.push(kv("y0", join(y0)));
    }
    header.push(kv("method", spec.method.name()));
    if let Method::FixedAlpha(alpha) = spec.method {
        header.push(kv("alpha", num(alpha)));
    }
    header.push(kv("stages", spec.stages));
    header.push(kv("perturb_index", index.map_or("none".into(), |j| j.to_string())));
    header.push(kv("t_end", num(spec.t_end)));
    header.push(kv("stage_tol", num(common.stage_tol)));
    header.push(kv("stage_solver", value_name(common.stage_solver)));
    if spec.method.is_energy_preserving() {
        header.push(kv("alpha_strategy", value_name(common.alpha_strategy)));
        header.push(kv("g_tol", num(common.g_tol)));
        header.push(kv("bracket_seed", common.bracket_seed.map_or("auto".into(), num)));
    }
    Ok(header)
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Shortest round-trip form, in exponent notation for very small or large values.
fn num(v: f64) -> String {
    if v == 0.0 || (1e-4..1e6).contains(&v.abs()) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|&v| num(v)).collect::<Vec<_>>().join(",")
}

fn value_name(v: impl ValueEnum) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

fn usage(e: Error) -> CliError {
    match e {
        Error::InvalidArgument(msg) => CliError::Usage(msg),
        other => CliError::Run(other),
    }
}

/// Parses a stepsize given as a decimal or as an exact power of two `2^-k`.
fn parse_stepsize(text: &str) -> Result<f64, CliError> {
    let text = text.trim();
    let value = match text.strip_prefix("2^") {
        Some(exp) => {
            let k: i32 = exp.parse().map_err(|_| CliError::Usage(format!("bad exponent in '{text}'")))?;
            2f64.powi(k)
        }
        None => text.parse().map_err(|_| CliError::Usage(format!("bad stepsize '{text}'")))?,
    };
    if !(value.is_finite() && value > 0.0) {
        return Err(CliError::Usage(format!("stepsize must be positive, got '{text}'")));
    }
    Ok(value)
}

/// `2^a:2^b` expands to every power of two from `2^a` down to `2^b`;
/// otherwise a comma separated list of stepsizes.
fn parse_h_list(text: &str) -> Result<Vec<f64>, CliError> {
    let list = match text.split_once(':') {
        Some((from, to)) => {
            let exponent = |part: &str| -> Result<i32, CliError> {
                part.trim()
                    .strip_prefix("2^")
                    .and_then(|e| e.parse().ok())
                    .ok_or_else(|| CliError::Usage(format!("range bounds must be powers of two 2^k, got '{part}'")))
            };
            let (a, b) = (exponent(from)?, exponent(to)?);
            if b >= a {
                return Err(CliError::Usage(format!("--h-list range must decrease, got '{text}'")));
            }
            (b..=a).rev().map(|k| 2f64.powi(k)).collect()
        }
        None => text.split(',').map(parse_stepsize).collect::<Result<Vec<_>, _>>()?,
    };
    if list.is_empty() {
        return Err(CliError::Usage("--h-list is empty".into()));
    }
    Ok(list)
}

/// `lo:hi:n` to n evenly spaced values including both ends.
fn parse_range(text: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("{flag} expects lo:hi:n, got '{text}'"));
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(bad());
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(bad());
    }
    Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect())
}

fn emit(path: Option<&Path>, bytes: &[u8], stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(path) => write_atomic(path, bytes),
        None => stdout.write_all(bytes).map_err(|source| CliError::Io { path: "stdout".into(), source }),
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |source| CliError::Io { path: path.display().to_string(), source };
    let name = path.file_name().ok_or_else(|| CliError::Usage(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    if let Err(e) = result.and_then(|()| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(e));
    }
    Ok(())
}

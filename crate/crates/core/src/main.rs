use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use harmonic_core::continuity::{continuity_solve, Mode, SolveOutcome, SolverConfig};
use harmonic_core::detector::{DEFAULT_GAP_TOL, DEFAULT_KERNEL_TOL};
use harmonic_core::problem::{bundled, generate, parse_grid, Family, FieldFile, Problem};
use harmonic_core::report::{self, plot_script, to_json, SolveReport, Verdict};
use harmonic_core::{Error, Result};

/// Thread count for the rayon pool; unset means one per core.
const THREADS_VAR: &str = "HARMET_THREADS";

const EXIT_ERROR: u8 = 1;
const EXIT_BLOWUP: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;
const EXIT_DISAGREE: u8 = 4;

#[derive(Parser)]
#[command(name = "harmet", version, about = "Harmonic metrics on flat tori by the continuity method")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SolveArgs {
    /// Problem file, or the name of a bundled problem.
    #[arg(long)]
    problem: String,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    eps_min: Option<f64>,
    /// newton, flow or hybrid.
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the continuity method; exit 0 on a harmonic metric, 2 on blow-up.
    Solve {
        #[command(flatten)]
        args: SolveArgs,
        /// Also write a plotting script for the trace.
        #[arg(long)]
        plot: bool,
    },
    /// Certify an invariant sub-bundle or the parallel endomorphisms; exit 3 when inconclusive.
    Detect {
        #[command(flatten)]
        args: SolveArgs,
        #[arg(long, default_value_t = DEFAULT_GAP_TOL)]
        gap_tol: f64,
    },
    /// Split a harmonic decomposable connection along a parallel projection.
    Split {
        #[command(flatten)]
        args: SolveArgs,
    },
    /// Gauge-transform a simple connection so that the reference metric is harmonic.
    GaugeFix {
        #[command(flatten)]
        args: SolveArgs,
    },
    /// Compare the solve outcome with the monodromy classification on a circle; exit 4 on disagreement.
    Oracle {
        #[command(flatten)]
        args: SolveArgs,
    },
    /// Write a generated problem.
    Gen {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        rank: usize,
        /// `N` or `NxM`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_problem(spec: &str) -> Result<Problem> {
    let path = Path::new(spec);
    if path.exists() {
        Problem::load(path)
    } else if let Some(text) = bundled(spec) {
        Problem::from_json_str(text)
    } else {
        Err(Error::Invalid(format!("{spec:?} is neither a file nor a bundled problem")))
    }
}

fn config(args: &SolveArgs) -> Result<SolverConfig> {
    let mut cfg = SolverConfig::default();
    if let Some(e) = args.eps_min {
        cfg.eps_min = e;
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(args: &SolveArgs) -> Result<(Problem, SolverConfig)> {
    let cfg = config(args)?;
    let problem = load_problem(&args.problem)?;
    fs::create_dir_all(&args.out)?;
    Ok((problem, cfg))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn solve(args: &SolveArgs, plot: bool) -> Result<u8> {
    let (problem, cfg) = prepare(args)?;
    let res = continuity_solve(&problem.connection, &problem.metric, &cfg)?;
    let grid = problem.grid();
    write(&args.out, "trace.csv", &res.trace.to_csv())?;
    write(&args.out, "solve_report.json", &to_json(&SolveReport::new(&args.problem, &res, &cfg)))?;
    if plot {
        write(&args.out, "plot_trace.py", &plot_script("trace.csv", "trace.png"))?;
    }
    match &res.outcome {
        SolveOutcome::Harmonic { h, .. } => {
            write(&args.out, "metric.json", &FieldFile::new(grid, "metric", h.values()).to_json_string())?;
            Ok(0)
        }
        SolveOutcome::BlowUp { u_infty, .. } => {
            write(&args.out, "u_infty.json", &FieldFile::new(grid, "u_infty", u_infty).to_json_string())?;
            Ok(EXIT_BLOWUP)
        }
    }
}

fn detect(args: &SolveArgs, gap_tol: f64) -> Result<u8> {
    let (problem, cfg) = prepare(args)?;
    let d = report::run_detect(&args.problem, &problem, &cfg, gap_tol, DEFAULT_KERNEL_TOL)?;
    write(&args.out, "detect_report.json", &to_json(&d.report))?;
    for (i, pi) in d.projections.iter().enumerate() {
        let name = format!("projection_rank{}", pi.rank());
        write(&args.out, &format!("projection_{i}.json"), &FieldFile::new(problem.grid(), &name, pi.values()).to_json_string())?;
    }
    Ok(if d.report.verdict == Verdict::Inconclusive { EXIT_INCONCLUSIVE } else { 0 })
}

fn split(args: &SolveArgs) -> Result<u8> {
    let (problem, cfg) = prepare(args)?;
    let rep = report::run_split(&args.problem, &problem, &cfg, DEFAULT_KERNEL_TOL)?;
    write(&args.out, "split_report.json", &to_json(&rep))?;
    Ok(match &rep.split {
        Some(s) if !s.passed => EXIT_INCONCLUSIVE,
        _ => 0,
    })
}

fn gauge_fix(args: &SolveArgs) -> Result<u8> {
    let (problem, cfg) = prepare(args)?;
    let (rep, fixed) = report::run_gauge_fix(&args.problem, &problem, &cfg, DEFAULT_KERNEL_TOL)?;
    write(&args.out, "gauge_fix_report.json", &to_json(&rep))?;
    write(&args.out, "gauge_fixed.json", &fixed.to_json_string())?;
    Ok(0)
}

fn oracle(args: &SolveArgs) -> Result<u8> {
    let (problem, cfg) = prepare(args)?;
    let rep = report::run_oracle(&args.problem, &problem, &cfg)?;
    write(&args.out, "oracle_report.json", &to_json(&rep))?;
    Ok(if rep.agree { 0 } else { EXIT_DISAGREE })
}

fn gen(family: Family, rank: usize, grid: &str, seed: u64, out: Option<&Path>) -> Result<u8> {
    let sizes = parse_grid(grid)?;
    let text = generate(family, rank, &sizes, seed)?.to_json_string();
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().map_err(|_| Error::Invalid(format!("{THREADS_VAR}={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Solve { args, plot } => solve(&args, plot),
        Command::Detect { args, gap_tol } => detect(&args, gap_tol),
        Command::Split { args } => split(&args),
        Command::GaugeFix { args } => gauge_fix(&args),
        Command::Oracle { args } => oracle(&args),
        Command::Gen { family, rank, grid, seed, out } => gen(family, rank, &grid, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

//! `precond`: batch runner for preconditioned gradient dynamics experiments.
//!
//! Exit codes: 0 on success, 1 for usage, config or IO errors, 2 when the
//! dynamics fail numerically (a JSON record is printed on stderr).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use commands::{Context, Failure};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "precond", version, about = "Preconditioned gradient dynamics in over-parameterized regression")]
struct Cli {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides PRECOND_SEED and the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Trajectory CSV per method plus summary.json.
    Simulate,
    /// Compare iterated dynamics with the closed-form trajectory.
    ClosedFormCheck,
    /// Compare final spectral iterates with the predicted limit.
    FixedPoint,
    /// Averaged metrics over Gaussian regression instances.
    TableGaussian,
    /// Median accuracy on the margin classification task.
    TableMargin,
    /// Power-law exponents of the coupling norm and in-span error.
    Decay {
        /// First step of the fit window.
        #[arg(long, requires = "fit_end")]
        fit_start: Option<usize>,
        /// Last step of the fit window, inclusive.
        #[arg(long, requires = "fit_start")]
        fit_end: Option<usize>,
    },
    /// Samples a + b/(T+1)^beta (1 - c/(alpha+beta-1) (T+1)^(1-alpha)).
    BoundCurve {
        #[arg(long = "a")]
        a: f64,
        #[arg(long = "b")]
        b: f64,
        #[arg(long = "c")]
        c: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        /// Last T sampled.
        #[arg(long = "T")]
        horizon: u64,
    },
    /// Grid search over step size and momentum.
    Sweep,
}

fn run(cli: &Cli) -> Result<Vec<String>, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed)?;
    commands::ensure_out_dir(&cli.out)?;
    let jobs = match cli.jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    };
    let verbosity = if cli.quiet { 0 } else { 1 + cli.verbose };
    // The subcommand's own flags are part of the effective configuration.
    let header = io::Header { config_hash: cfg.hash_with(&format!("{:?}", cli.command)), seed: cfg.seed };
    let ctx = Context { cfg: &cfg, header, out: &cli.out, jobs, verbosity };
    match &cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::ClosedFormCheck => commands::closed_form_check(&ctx),
        Command::FixedPoint => commands::fixed_point(&ctx),
        Command::TableGaussian => commands::table_gaussian(&ctx),
        Command::TableMargin => commands::table_margin(&ctx),
        Command::Decay { fit_start, fit_end } => commands::decay(&ctx, fit_start.zip(*fit_end)),
        Command::BoundCurve { a, b, c, alpha, beta, horizon } => {
            commands::bound_curve(&ctx, [*a, *b, *c, *alpha, *beta], *horizon)
        }
        Command::Sweep => commands::sweep(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = std::panic::catch_unwind(|| run(&cli));
    match outcome {
        Ok(Ok(files)) => {
            if !cli.quiet {
                for f in files {
                    eprintln!("wrote {}", cli.out.join(f).display());
                }
            }
            ExitCode::SUCCESS
        }
        Ok(Err(Failure::Setup(e))) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Numerical { method, error })) => {
            eprintln!("{}", report::error_record(method.as_deref(), &error));
            ExitCode::from(2)
        }
        Err(_) => {
            eprintln!("{}", serde_json::json!({ "error": "internal", "message": "unexpected panic" }));
            ExitCode::from(2)
        }
    }
}

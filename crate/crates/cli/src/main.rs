//! `proxylab` — command-line harness for the constrained policy-optimization
//! laboratory.
//!
//! A TOML config selects the environment, method, and training setup; each
//! subcommand runs one experiment phase over the config's seed list, writes
//! its artifacts under the output directory, and prints a one-line summary
//! per run. Exit codes: 0 success, 1 config error, 2 numerical abort,
//! 3 infeasible (the density mask rejected every grid node).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;
mod config;
mod error;

use commands::PlotKind;
use config::{Overrides, Phase};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "proxylab",
    version,
    about = "Proxy-reward overoptimization laboratory: constrained training, \
             proxy-point fitting, and threshold search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the phase named by the config's [run].phase (default: train).
    Run(RunArgs),
    /// Single-channel measurement runs, surface fit, and the proxy point.
    Phase1(RunArgs),
    /// Phase-1 fit, then a constrained run holding the fitted proxy point.
    TwoPhase(RunArgs),
    /// Budget-capped simplex search for gold-optimal thresholds.
    Nm(RunArgs),
    /// One fixed-weight run per reward weighting.
    Sweep(RunArgs),
    /// Tidy plotting CSVs from previously written artifacts.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; omit to run the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides [run].out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rounds between gold probes (overrides [train].probe_every).
    #[arg(long)]
    probe_every: Option<usize>,
    /// Total environment steps per run (overrides [train].total_steps).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// TOML experiment config; omit to use the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which dataset to emit.
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Artifact directory to aggregate (defaults to the kind's phase
    /// directory under the config's output directory).
    #[arg(long)]
    from: Option<PathBuf>,
    /// Output directory (overrides [run].out).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive as "errors" but are success paths;
            // genuine usage mistakes exit like any other config error.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => execute(args, None),
        Command::Phase1(args) => execute(args, Some(Phase::Phase1)),
        Command::TwoPhase(args) => execute(args, Some(Phase::TwoPhase)),
        Command::Nm(args) => execute(args, Some(Phase::NmSearch)),
        Command::Sweep(args) => execute(args, Some(Phase::Sweep)),
        Command::Plotdata(args) => {
            let file = config::load(args.config.as_deref())?;
            let overrides = Overrides { out: args.out, ..Overrides::default() };
            // Plot aggregation reuses the resolved config only for the
            // channel count, thresholds, and output directory.
            let exp = config::resolve(file, Some(Phase::Train), &overrides)?;
            commands::plotdata(&exp, args.kind, args.from)
        }
    }
}

fn execute(args: RunArgs, forced: Option<Phase>) -> Result<(), CliError> {
    let file = config::load(args.config.as_deref())?;
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        probe_every: args.probe_every,
        steps: args.steps,
    };
    let exp = config::resolve(file, forced, &overrides)?;
    match exp.phase {
        Phase::Train => commands::train(&exp),
        Phase::Phase1 => commands::phase1(&exp),
        Phase::TwoPhase => commands::two_phase(&exp),
        Phase::NmSearch => commands::nm(&exp),
        Phase::Sweep => commands::sweep(&exp),
    }
}

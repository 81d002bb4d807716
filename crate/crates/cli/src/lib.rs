//! Configuration files, CSV formats and the commands of the `droploss`
//! binary, on top of `droploss-core`.
//!
//! [`run`] is the whole command line: the binary only forwards its arguments.
//! Exit codes: 0 success, 1 gradient check failure or other error, 2 bad
//! configuration or flags, 3 non-finite loss during training.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod formats;

#[derive(Parser)]
#[command(name = "droploss", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its log, evaluation and diagnostics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the first seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of loss variants over the config's seeds and mark the
    /// tail/head Pareto front.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// beql, fixed_drop, eql, droploss, bce or softmax; repeatable or
        /// comma separated.
        #[arg(long = "family", required = true)]
        families: Vec<String>,
        /// Comma separated values, one --grid per parameterized family, in
        /// order.
        #[arg(long = "grid")]
        grids: Vec<String>,
        /// Runs this seed only instead of the config's seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// No per-run progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Compare analytic gradients of every loss variant with central
    /// differences.
    Gradcheck {
        /// Adds this offset to one analytic gradient entry (negative control).
        #[arg(long, default_value_t = 0.0, hide = true)]
        perturb: f64,
    },
    /// Recompute the diagnostics of a finished `train` run.
    Diagnose {
        /// Output directory of `train`.
        run_dir: PathBuf,
        /// Where to write; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<config::ConfigError>() || err.is::<commands::UsageError>() {
        return 2;
    }
    if let Some(droploss_core::Error::NonFiniteLoss { .. }) = err.downcast_ref() {
        return 3;
    }
    1
}

/// Runs one command line (program name first). Reports go to `out`, errors
/// and progress to stderr. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            out: dir,
        } => commands::train(
            commands::TrainArgs {
                config,
                seed,
                out: dir,
            },
            out,
        ),
        Command::Sweep {
            config,
            families,
            grids,
            seed,
            out: dir,
            jobs,
            quiet,
        } => commands::sweep(
            commands::SweepArgs {
                config,
                families,
                grids,
                seed,
                out: dir,
                jobs,
                quiet,
            },
            out,
        ),
        Command::Gradcheck { perturb } => commands::gradcheck(perturb, out),
        Command::Diagnose { run_dir, out: dir } => {
            commands::diagnose(commands::DiagnoseArgs { run_dir, out: dir }, out)
        }
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

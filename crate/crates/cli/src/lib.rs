//! Command-line front end for task grouping.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifact;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use tag_core::theory::{GradientNorm, ThresholdForm};

use config::SelectionMode;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "tag",
    version,
    about = "Group tasks by lookahead affinity",
    after_help = "Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 property violation.\nSet TAG_LOG=info for progress logs."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Convention {
    Unit,
    MatchTrueGradient,
}

impl From<Convention> for GradientNorm {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Unit => GradientNorm::Unit,
            Convention::MatchTrueGradient => GradientNorm::MatchTrueGradient,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe, select, retrain and compare against the baselines.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Parent directory; the run lands in `<out>/<run_id>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe once and write the averaged affinity matrix.
    Affinity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose groups from an affinity CSV.
    Select {
        #[arg(long)]
        affinity: PathBuf,
        #[arg(long)]
        budget: usize,
        #[arg(long, value_enum, default_value_t = SelectionMode::Train)]
        mode: SelectionMode,
        #[arg(long)]
        max_group_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every candidate group and rank all groupings by test loss.
    Exhaustive {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized checks of the quadratic affinity claims.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "proof")]
        threshold_form: ThresholdForm,
    },
    /// Print the two-dimensional counterexample table.
    Counterexample {
        #[arg(long, value_enum, default_value_t = Convention::Unit)]
        convention: Convention,
        #[arg(long)]
        json: bool,
    },
    /// Merge run directories into one report.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, out } => {
            let dir = commands::run(&config, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Affinity { config, out } => {
            let dir = commands::affinity(&config, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Select {
            affinity,
            budget,
            mode,
            max_group_size,
            out,
        } => {
            let r = commands::select(&affinity, budget, mode, max_group_size, &out)?;
            let groups: Vec<Vec<usize>> = r.groups.iter().map(|g| g.ids()).collect();
            println!("groups {groups:?} total {}", r.total_score);
        }
        Command::Exhaustive { config, budget, top, out } => {
            let dir = commands::exhaustive(&config, budget, top, out.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Verify {
            trials,
            seed,
            threshold_form,
        } => commands::verify_cmd(trials, seed, threshold_form)?,
        Command::Counterexample { convention, json } => print!("{}", commands::counterexample(convention.into(), json)),
        Command::Report { inputs, out } => {
            commands::report(&inputs, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

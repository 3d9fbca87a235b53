//! `resbuild`: run, check and maintain builds described in a JSON file.
//!
//! Exit status: 0 when the build (or check) is valid, 2 when it is invalid or
//! a counterexample was found, 1 on any error. Machine-readable reports go to
//! standard output, a short human summary to standard error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "resbuild", version, about = "Reliable incremental, parallel builds over a simulated shared state")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// The build description, its initial state and inferred edges.
#[derive(Debug, Args)]
pub struct Input {
    /// Build description (JSON).
    pub desc: PathBuf,
    /// Initial shared state (JSON).
    #[arg(long)]
    pub state: PathBuf,
    /// Inferred-edge sidecar file, added to the declared edges.
    #[arg(long)]
    pub edges: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Serial,
    Parallel,
    Locking,
    Mvto,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a build and check its validity.
    Build {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value = "serial")]
        mode: Mode,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        /// Reproducible interleaving: a seeded pick order for `parallel`,
        /// a seeded dispatch order for `locking` and `mvto`.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the final state here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the access trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write a digest db for later incremental builds here.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Digest db of an earlier build; its accesses become lock predictions.
        #[arg(long)]
        predict: Option<PathBuf>,
    },
    /// Re-run only what changed since the build recorded in the digest db.
    Incremental {
        #[command(flatten)]
        input: Input,
        /// Digest db of the previous build; updated in place.
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add edges until a build is valid; writes the sidecar file.
    Infer {
        #[command(flatten)]
        input: Input,
    },
    /// Drop every inferred edge and infer again; writes the sidecar file.
    Prune {
        #[command(flatten)]
        input: Input,
    },
    /// Explore every interleaving and check they agree.
    Verify {
        #[command(flatten)]
        input: Input,
        /// Maximum tasks, accesses per task and interleavings explored.
        #[arg(long, value_parser = commands::parse_limits)]
        limits: Option<resbuild_core::oracle::Limits>,
        /// Directory for the two interleavings of a counterexample.
        #[arg(long)]
        counterexample: Option<PathBuf>,
    },
    /// Re-run a recorded interleaving exactly.
    Replay {
        #[command(flatten)]
        input: Input,
        /// Interleaving file (JSON list of task names, one per access) or a
        /// trace export.
        #[arg(long)]
        choice: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compute a greedy schedule.
    Schedule {
        desc: PathBuf,
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        /// JSON map from task to duration; missing tasks take 1.
        #[arg(long)]
        durations: Option<PathBuf>,
        /// Prefer tasks on the longest remaining path.
        #[arg(long)]
        critical_path: bool,
    },
    /// Propose coarser resources and tasks from a build's accesses.
    Suggest {
        #[command(flatten)]
        input: Input,
        /// Resources changed more often than this stay separate.
        #[arg(long, default_value_t = 0)]
        hot: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a proposal, producing a new build description.
    Apply {
        desc: PathBuf,
        #[arg(long)]
        edges: Option<PathBuf>,
        #[arg(long)]
        proposal: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // usage errors exit 1 like any other error; 2 means an invalid build
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Build { input, mode, workers, seed, out, trace, db, predict } => commands::build(
            &input,
            mode,
            workers,
            seed,
            out.as_deref(),
            trace.as_deref(),
            db.as_deref(),
            predict.as_deref(),
        ),
        Command::Incremental { input, db, out } => commands::incremental(&input, &db, out.as_deref()),
        Command::Infer { input } => commands::infer(&input),
        Command::Prune { input } => commands::prune(&input),
        Command::Verify { input, limits, counterexample } => {
            commands::verify(&input, limits.unwrap_or_default(), counterexample.as_deref())
        }
        Command::Replay { input, choice, out, trace } => {
            commands::replay(&input, &choice, out.as_deref(), trace.as_deref())
        }
        Command::Schedule { desc, edges, workers, durations, critical_path } => {
            commands::schedule(&desc, edges.as_deref(), workers, durations.as_deref(), critical_path)
        }
        Command::Suggest { input, hot, out } => commands::suggest(&input, hot, out.as_deref()),
        Command::Apply { desc, edges, proposal, out } => {
            commands::apply(&desc, edges.as_deref(), &proposal, out.as_deref())
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

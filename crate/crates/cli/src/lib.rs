//! The `motif` command-line front-end.
//!
//! Every subcommand is a function of its configuration file and seed, so
//! rerunning a command reproduces its metrics and checkpoints exactly.
//! Exit codes are listed in [`error::exit`].

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{exit, CliError};

/// Environment variable that caps worker threads.
pub const THREADS_ENV: &str = "MOTIF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "motif",
    version,
    about = "Train and inspect small differential-attention language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `paths.out`, then `motif-out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Length-filter and deduplicate a JSONL corpus.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain from scratch or continue from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to continue from; metrics are appended.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Optimizer steps to run in this invocation.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Long-context continuation with a larger RoPE base.
    Anneal {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Average checkpoints parameter by parameter.
    Average {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Directory that receives `average.ckpt`.
        #[arg(long)]
        out: PathBuf,
        /// Verify every input against this configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Preference optimisation over the configured stages.
    Dpo {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
    },
    /// Generate bytes from a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        /// 0 selects greedy decoding.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter totals for a configuration.
    CountParams {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// `motif-2.6b` or `toy`.
        #[arg(long)]
        preset: Option<String>,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status. Diagnostics go to stderr.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match with_thread_cap(|| commands::dispatch(cli.command)) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("motif: error: {e}");
            e.exit_code()
        }
    }
}

fn with_thread_cap(f: impl FnOnce() -> Result<(), CliError> + Send) -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return f();
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build a {n}-thread pool: {e}")))?;
    pool.install(f)
}

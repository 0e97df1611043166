//! The `geounify` command line: fixture generation, encoding, indexing,
//! training, running, evaluation and gradient checking.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, missing or invalid
//! inputs), 2 for internal faults (divergence, violated report invariants,
//! failed gradient checks, panics).

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{Layout, CONFIG_NAME, LABELS_NAME, REPORT_NAME, RESULTS_NAME};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] geounify_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_user_error() => EXIT_USER,
            CliError::Usage(_) => EXIT_USER,
            _ => EXIT_INTERNAL,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "geounify", version, about = "Hierarchical cross-view geo-localization")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML configuration; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the model seed and the fixture seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for every artefact.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic fixture world.
    Fixtures(FixturesArgs),
    /// Encode tiles and queries into backbone features.
    Encode(EncodeArgs),
    /// Build or query the global-descriptor index.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Train the model on the fixture's train split.
    Train(TrainArgs),
    /// Run retrieval, re-ranking and localisation on the test split.
    Run(RunArgs),
    /// Recompute the evaluation report of a stored run.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    /// Replace an existing fixture directory.
    #[arg(long)]
    pub force: bool,
    /// Add one near-duplicate decoy per tile.
    #[arg(long)]
    pub adversarial: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Fixture directory [default: <out>/fixtures].
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Which queries to encode besides every tile.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Encode with the detail model of a separately trained run.
    #[arg(long)]
    pub detail: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Subcommand)]
pub enum IndexAction {
    /// Index every tile of a feature set.
    Build {
        /// Feature directory or manifest [default: <out>/features].
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Nearest tiles of one query.
    Query {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Continue from the last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Replace an existing model directory.
    #[arg(long, conflicts_with = "resume")]
    pub force: bool,
    /// Stop after this many optimizer steps (checkpointed for --resume).
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Candidates passed to re-ranking [default: from config].
    #[arg(long)]
    pub k: Option<usize>,
    /// Localise in the top retrieval candidate without re-ranking.
    #[arg(long)]
    pub no_rerank: bool,
    /// Use ingested features instead of encoding the fixture.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Also write each query's localisation distribution.
    #[arg(long)]
    pub traces: bool,
    /// Print one query's full result instead of running the split.
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Stored run directory [default: <out>/run].
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Print the aligned table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Coordinates or directions probed per parameter group.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 7)]
    pub probe_seed: u64,
}

/// Parse `argv` and run; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
        }
    };
    let outcome = std::panic::catch_unwind(|| {
        let pool = geounify_core::workers::pool()?;
        pool.install(|| commands::dispatch(&cli))
    });
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal fault (panic)");
            EXIT_INTERNAL
        }
    }
}

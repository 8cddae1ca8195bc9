//! `coreselect` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coreselect::Error;

#[derive(Debug, Parser)]
#[command(name = "coreselect", version, about = "Contrastive coreset scoring, selection and evaluation")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Contrastive training with per-epoch score accumulation.
    TrainScore,
    /// Cut a slice out of a ranking.
    Select(SelectArgs),
    /// Evaluation battery.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Ranking CSV written by `train-score` or `eval baseline`.
    #[arg(long, value_name = "PATH")]
    pub ranking: PathBuf,
    /// Subset size as a count.
    #[arg(long, conflicts_with = "fraction", required_unless_present = "fraction")]
    pub size: Option<usize>,
    /// Subset size as a fraction of the ranking, in (0, 1].
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Number of top-ranked examples to skip.
    #[arg(long, default_value_t = 0)]
    pub stride: usize,
}

#[derive(Debug, Args, Default)]
pub struct ArtifactArgs {
    /// Ranking CSV; repeat for several seed runs. Overrides `eval.rankings`.
    #[arg(long = "ranking", value_name = "PATH")]
    pub rankings: Vec<PathBuf>,
    /// Newline-delimited subset indices. Overrides `eval.subset`.
    #[arg(long, value_name = "PATH")]
    pub subset: Option<PathBuf>,
    /// Score checkpoint. Overrides `eval.scores`.
    #[arg(long, value_name = "PATH")]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Random,
    Forgetting,
    Kcenters,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Classifier accuracy on ranking slices at increasing strides, with a random baseline.
    Stride(ArtifactArgs),
    /// Coreset-to-rest and rest-to-coreset transfer.
    Cross(ArtifactArgs),
    /// Intersection ratio of the top slices of several rankings.
    Consistency(ArtifactArgs),
    /// Class shares inside a subset.
    Imbalance(ArtifactArgs),
    /// Distribution of per-example mean cossim.
    CossimStats(ArtifactArgs),
    /// Comparison selectors.
    Baseline {
        /// Overrides `eval.method`.
        #[arg(long, value_enum)]
        method: Option<BaselineMethod>,
    },
}

/// Global flags shared by every command.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub resume: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Bounds(_) | Error::Protocol(_) | Error::State(_) => 2,
        Error::Numeric(_) => 3,
        Error::Format { .. } | Error::Data(_) | Error::Io { .. } => 4,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("CORESELECT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CORESELECT_THREADS: expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("CORESELECT_THREADS: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        resume: cli.resume,
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::TrainScore => commands::train_score(&globals),
        Command::Select(args) => commands::select(&globals, &args),
        Command::Eval { which } => commands::eval(&globals, which),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

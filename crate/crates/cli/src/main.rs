//! `msfner` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msfner::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "msfner", version, about = "Few-shot named-entity recognition: train, fine-tune, decode, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set steps=300`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Random seed. Falls back to MSFNER_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training corpus. Overrides `train_corpus`.
    #[arg(long)]
    train: Option<PathBuf>,

    /// Validation corpus. Overrides `valid_corpus`.
    #[arg(long)]
    valid: Option<PathBuf>,

    /// Fixed training episodes, cycled in order, instead of live sampling.
    #[arg(long)]
    train_episodes: Option<PathBuf>,

    /// Checkpoint written with the best validation parameters.
    #[arg(long)]
    out: PathBuf,

    /// Per-step metrics log, one JSON object per line. Defaults to
    /// `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,

    /// Also write the resolved configuration to this file.
    #[arg(long)]
    dump_config: Option<PathBuf>,
}

/// Where a task's support and query sentences come from.
#[derive(Debug, Args)]
struct TaskArgs {
    /// Episode file (one JSON episode or JSON lines).
    #[arg(long, conflicts_with = "support")]
    episodes: Option<PathBuf>,

    /// Episode index within `--episodes`.
    #[arg(long, requires = "episodes", conflicts_with = "all_episodes")]
    episode: Option<usize>,

    /// Use every episode of `--episodes`.
    #[arg(long, requires = "episodes")]
    all_episodes: bool,

    /// Labelled support corpus.
    #[arg(long)]
    support: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train the entity span detector.
    TrainEsd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Meta-train the entity classifier.
    TrainEc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Fine-tune a checkpoint on one target support set.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Store the support entity vectors of a classifier checkpoint.
    BuildDatastore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample N-way K-shot episodes from a corpus.
    SampleEpisodes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Types per episode. Defaults to `n_way`.
        #[arg(long)]
        n: Option<usize>,
        /// Shots per type. Defaults to `k_shot`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect and type entities in query sentences.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Span detector checkpoint.
        #[arg(long)]
        esd: PathBuf,
        /// Entity classifier checkpoint.
        #[arg(long)]
        ec: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Query corpus, used with `--support`.
        #[arg(long, requires = "support")]
        query: Option<PathBuf>,
        /// Prebuilt datastore. Built from the support set when omitted.
        #[arg(long, conflicts_with = "all_episodes")]
        datastore: Option<PathBuf>,
        /// Predictions, one JSON object per sentence.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Episode file or labelled corpus.
        #[arg(long)]
        gold: PathBuf,
        /// Score only this episode of an episode file.
        #[arg(long)]
        episode: Option<usize>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err.chain().find_map(|e| e.downcast_ref::<msfner::Error>()).map(msfner::Error::class);
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Numeric) => 4,
        Some(ErrorClass::Data) | None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

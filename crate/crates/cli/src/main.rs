//! `recipe-debias`: generate corpora, train, build dictionaries, evaluate
//! and render reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recipe_debias::corpus::CorpusError;
use recipe_debias::debias::ScoreMode;
use recipe_debias::dictionaries::{DictionaryError, LabelKind};
use recipe_debias::eval::{EvalError, RouterMode};
use recipe_debias::retrieval::RetrievalError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_)
            | CliError::Corpus(CorpusError::Config { .. })
            | CliError::Retrieval(RetrievalError::Config(_))
            | CliError::Eval(EvalError::Config(_) | EvalError::SizeTooLarge { .. } | EvalError::Format(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "recipe-debias", version, about = "Debiased cross-cultural image-to-recipe retrieval")]
struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic visibility-biased corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run pre-training, dictionary construction and end-to-end training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory; defaults to `<run root>/<config file stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "RECIPE_DEBIAS_RUN_ROOT", default_value = "runs")]
        run_root: PathBuf,
        #[arg(long, conflicts_with = "resume")]
        force: bool,
        /// Continue from the last completed step; the config must match.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run and write CSV and JSON reports.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Scoring mode; defaults to the mode the run was trained with.
        #[arg(long)]
        mode: Option<ScoreMode>,
        /// Comma-separated gallery sizes; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value = "oracle")]
        router: RouterMode,
        /// Add median ranks per held-out category.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Render report files as aligned text tables.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Build dictionaries of a given size from a run's pre-trained encoder.
    BuildDict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value = "ingredient")]
        kind: LabelKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out, force } => commands::synth(&config, &out, force),
        Command::Train {
            config,
            corpus,
            out,
            run_root,
            force,
            resume,
        } => {
            let out = out.unwrap_or_else(|| {
                let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
                run_root.join(stem)
            });
            commands::train(&config, &corpus, &out, force, resume)
        }
        Command::Eval {
            run,
            mode,
            sizes,
            runs,
            router,
            zero_shot,
        } => commands::eval(&commands::EvalArgs {
            run,
            mode,
            sizes,
            runs,
            router,
            zero_shot,
        }),
        Command::Report { files } => commands::report(&files),
        Command::BuildDict {
            run,
            size,
            kind,
            out,
            force,
        } => commands::build_dict(&run, size, kind, &out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

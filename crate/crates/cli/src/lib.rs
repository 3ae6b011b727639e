//! The `spkdino` command-line tool: corpus synthesis, DINO / x-vector
//! training, fine-tuning, embedding extraction, scoring, pseudo-label
//! iteration, evaluation and report tables.
//!
//! Exit status: 0 success, 1 other failure, 2 configuration error,
//! 3 numerical divergence.

pub mod commands;
pub mod config;
mod output;
pub mod report;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "spkdino", version, about = "Self-distilled speaker embeddings at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every subcommand takes.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// INI-style config; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed (overrides the config's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a corpus: wavs, manifest and an all-pairs trial list.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised DINO training on a manifest (labels unused).
    TrainDino {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Supervised x-vector training with the margin loss on speaker labels.
    TrainXvector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        chunking: Chunking,
    },
    /// Fine-tune a pretrained encoder on attribute (or speaker) labels.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained checkpoint (DINO or classifier); random init if absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Held-out manifest; without it speakers are split off the corpus.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, value_parser = ["attr", "speaker"], default_value = "attr")]
        target: String,
        #[arg(long, value_parser = ["ft1", "ft2"])]
        strategy: Option<String>,
        #[arg(long, value_parser = ["ce", "aam"])]
        loss: Option<String>,
        #[command(flatten)]
        chunking: Chunking,
    },
    /// Embeddings of every utterance in a manifest.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Which network of a DINO checkpoint.
        #[arg(long, value_parser = ["teacher", "student"], default_value = "teacher")]
        which: String,
        /// Also write the normalized log-mel features as an archive.
        #[arg(long)]
        features: bool,
    },
    /// Score a trial list with cosine or PLDA.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, value_parser = ["cosine", "plda"])]
        backend: Option<String>,
        /// Trained PLDA model to load.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Embeddings and manifest to fit PLDA on when no model is given.
        #[arg(long)]
        train_embeddings: Option<PathBuf>,
        #[arg(long)]
        train_manifest: Option<PathBuf>,
    },
    /// Pseudo-label cycles starting from a pretrained encoder.
    ClusterIterate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Held-out trials; all pairs of the held-out set if absent.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// EER, minDCF and the DET curve of a score file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        trials: PathBuf,
    },
    /// Aggregate `summary.json` files of many runs into CSV tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories (searched recursively) or summary files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Column of the pivot table's rows.
        #[arg(long, default_value = "chunk_len_s")]
        by: String,
        #[arg(long, default_value = "heldout_accuracy")]
        metric: String,
    },
}

/// Training-chunk overrides shared by the supervised subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct Chunking {
    #[arg(long)]
    pub chunk_len: Option<f64>,
    #[arg(long, value_parser = ["zero", "repeat"])]
    pub pad: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub augment: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Diverged,
    Other,
}

/// A failed run, with the config it was using for context.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub config: Option<PathBuf>,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            config: None,
            msg: msg.into(),
        }
    }

    pub fn other(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Other,
            config: None,
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Other => 1,
            ErrorKind::Config => 2,
            ErrorKind::Diverged => 3,
        }
    }

    fn with_config(mut self, path: Option<&PathBuf>) -> Self {
        if self.config.is_none() {
            self.config = path.cloned();
        }
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ErrorKind::Config => "config error",
            ErrorKind::Diverged => "diverged",
            ErrorKind::Other => "error",
        };
        match &self.config {
            Some(p) => write!(f, "{what} [config {}]: {}", p.display(), self.msg),
            None => write!(f, "{what} [config: defaults]: {}", self.msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<spkdino::Error> for CliError {
    fn from(e: spkdino::Error) -> Self {
        Self {
            kind: if e.is_divergence() {
                ErrorKind::Diverged
            } else {
                ErrorKind::Other
            },
            config: None,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Synth { common }
        | Command::TrainDino { common, .. }
        | Command::TrainXvector { common, .. }
        | Command::Finetune { common, .. }
        | Command::Extract { common, .. }
        | Command::Score { common, .. }
        | Command::ClusterIterate { common, .. }
        | Command::Eval { common, .. }
        | Command::Report { common, .. } => common,
    }
}

/// Runs one subcommand; every error carries the config path.
pub fn run(cli: &Cli) -> CliResult {
    let c = common(&cli.command);
    commands::dispatch(&cli.command).map_err(|e| e.with_config(c.config.as_ref()))
}

//! `viewagg`: zero-shot evaluation, few-shot training and tooling over
//! exported multi-view feature containers.

mod commands;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use viewagg_core::aggregate::{Aggregator, DEFAULT_LOGIT_SCALE};
use viewagg_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// A command failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure { code: EXIT_NUMERIC, message: message.into() }
    }

    pub fn io(path: impl AsRef<Path>, e: std::io::Error) -> Self {
        Failure::data(format!("{}: {e}", path.as_ref().display()))
    }

    pub fn csv(e: csv::Error) -> Self {
        Failure::data(format!("writing CSV: {e}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser)]
#[command(name = "viewagg", version, about = "Multi-view shape recognition from exported view features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AggArg {
    Peva,
    Avg,
}

impl From<AggArg> for Aggregator {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Peva => Aggregator::Peva,
            AggArg::Avg => Aggregator::Avg,
        }
    }
}

#[derive(Args)]
pub struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split to read.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Zero-shot accuracy from aggregated view features.
    ZeroShot(ZeroShotArgs),
    /// Train the few-shot aggregator on K shapes per class.
    Train(TrainArgs),
    /// Few-shot accuracy of a trained checkpoint.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Finite-difference check of every backward rule and the encoder.
    Gradcheck(GradcheckArgs),
    /// Write one descriptor per shape as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "peva")]
    pub agg: AggArg,
    /// Logit scale (does not change predictions).
    #[arg(long, default_value_t = DEFAULT_LOGIT_SCALE)]
    pub scale: f64,
    /// Also write per-shape view scores and weights to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Metrics file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON) with a `train` split.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoint.pevf, epochs.jsonl and config.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Shots per class.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train with the classification loss only.
    #[arg(long)]
    pub no_distill: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub proj_width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// Record test-split accuracy after every epoch.
    #[arg(long)]
    pub track_test: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory for the containers and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Cosine between a class prototype and its prompt.
    #[arg(long)]
    pub alignment: Option<f64>,
    /// Per-coordinate noise std on informative views.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probability that a view is pure noise.
    #[arg(long)]
    pub degenerate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add a sampled check at the default projection width.
    #[arg(long)]
    pub wide: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negate one op's backward rule (harness self-test).
    #[arg(long, hide = true)]
    pub inject_sign_flip: Option<String>,
}

#[derive(Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Few-shot descriptors from this checkpoint instead of zero-shot ones.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "peva")]
    pub agg: AggArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ZeroShot(a) => commands::zero_shot(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::DumpEmbeddings(a) => commands::dump_embeddings(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

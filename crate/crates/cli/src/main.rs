//! `ccfrec`: the staged pipeline from raw data to evaluated recommender.
//!
//! ```text
//! ccfrec synth | ingest | embed | quantize | train | eval | export-reps | finetune-ids
//! ```

mod artifacts;
mod settings;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use artifacts::Layout;
use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage}: missing prerequisite: {what} (run `ccfrec {hint}` first)")]
    Missing {
        stage: &'static str,
        what: String,
        hint: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ccfrec::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing { .. } | CliError::Config(_) => 2,
            CliError::Core(ccfrec::Error::ConflictingFlags(_) | ccfrec::Error::InvalidArgument(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccfrec", version, about = "Semantic-code sequential recommender pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic topic-structured corpus as raw input files.
    Synth,
    /// Read raw items and interactions and apply k-core filtering.
    Ingest,
    /// Encode every attribute of every item into the embedding cache.
    Embed,
    /// Fit per-attribute codebooks and assign semantic codes.
    Quantize,
    /// Train a model; writes runs/<run_id>/{best,last}.ckpt and metrics.jsonl.
    Train,
    /// Full-ranking evaluation of a run's best checkpoint.
    Eval {
        /// Evaluate this run instead of the one the settings describe.
        #[arg(long)]
        run: Option<String>,
        /// Evaluate the ID fine-tuned checkpoint of the run.
        #[arg(long)]
        finetuned: bool,
    },
    /// Write the precomputed item-vector cache of a run.
    ExportReps {
        /// Run id to export (defaults to the run the settings describe).
        #[arg(long)]
        run: Option<String>,
    },
    /// Add item-ID embeddings to a trained run and fine-tune only those.
    FinetuneIds {
        /// Run id to extend (defaults to the run the settings describe).
        #[arg(long)]
        run: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Embed => "embed",
            Command::Quantize => "quantize",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::ExportReps { .. } => "export-reps",
            Command::FinetuneIds { .. } => "finetune-ids",
        }
    }
}

#[derive(Debug, Args)]
struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory holding every stage's outputs.
    #[arg(long, global = true, value_name = "PATH")]
    workdir: Option<PathBuf>,
    /// Training seed (initialisation, batching, masking, dropout).
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Product quantization (the default).
    #[arg(long, global = true, conflicts_with = "rq")]
    pq: bool,
    /// Residual quantization.
    #[arg(long, global = true)]
    rq: bool,
    /// Sub-vectors (PQ) or levels (RQ) per attribute.
    #[arg(long, global = true, value_name = "INT")]
    k: Option<usize>,
    /// Centroids per codebook.
    #[arg(long, global = true, value_name = "INT")]
    codebook_size: Option<usize>,
    /// Weight of the masked-code loss.
    #[arg(long, global = true, value_name = "F")]
    alpha: Option<f64>,
    /// Weight of the sequence alignment loss.
    #[arg(long, global = true, value_name = "F")]
    beta: Option<f64>,
    /// Fraction of an item's codes corrupted for masking.
    #[arg(long, global = true, value_name = "F")]
    mask_ratio: Option<f64>,
    /// Softmax temperature of every cosine-similarity loss.
    #[arg(long, global = true, value_name = "F")]
    temperature: Option<f64>,
    /// Ablation switches, comma-separated.
    #[arg(long, global = true, value_name = "NAME")]
    ablation: Option<String>,
    /// Rank every item, including those already in the user's history.
    #[arg(long, global = true)]
    no_exclude_seen: bool,
    /// Any other config key, e.g. `--set max_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<Settings, CliError> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            s.set(k.trim(), v.trim())?;
        }
        if let Some(w) = &self.workdir {
            s.workdir = w.clone();
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if self.pq {
            s.method = ccfrec::quantizer::QuantMethod::Pq;
        }
        if self.rq {
            s.method = ccfrec::quantizer::QuantMethod::Rq;
        }
        if let Some(v) = self.k {
            s.levels = v;
        }
        if let Some(v) = self.codebook_size {
            s.codebook_size = v;
        }
        if let Some(v) = self.alpha {
            s.alpha = v;
        }
        if let Some(v) = self.beta {
            s.beta = v;
        }
        if let Some(v) = self.mask_ratio {
            s.mask_ratio = v;
        }
        if let Some(v) = self.temperature {
            s.temperature = v;
        }
        if let Some(v) = &self.ablation {
            s.ablation = v.clone();
        }
        if self.no_exclude_seen {
            s.exclude_seen = false;
        }
        // Surface bad ablation names and conflicts before any work starts.
        s.train_config()?.validate()?;
        Ok(s)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let s = cli.overrides.resolve()?;
    let layout = Layout::new(&s.workdir);
    match &cli.command {
        Command::Synth => stages::synth(&s),
        Command::Ingest => stages::ingest(&s, &layout),
        Command::Embed => stages::embed(&s, &layout),
        Command::Quantize => stages::quantize(&s, &layout),
        Command::Train => stages::train_stage(&s, &layout),
        Command::Eval { run, finetuned } => stages::eval(&s, &layout, run.as_deref(), *finetuned),
        Command::ExportReps { run } => stages::export_reps(&s, &layout, run.as_deref()),
        Command::FinetuneIds { run } => stages::finetune_ids(&s, &layout, run.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e {
                CliError::Missing { .. } => eprintln!("ccfrec: {e}"),
                _ => eprintln!("ccfrec {}: {e}", cli.command.name()),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

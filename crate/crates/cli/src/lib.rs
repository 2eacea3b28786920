//! `qrrank` command-line driver.
//!
//! Each subcommand reads its inputs from files, writes only to the paths it
//! is given and reports failures as a single `error[category]: message` line.
//! Usage mistakes exit with status 2, runtime failures with status 1.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use qrrank_core::eval::RecallDefinition;
use qrrank_core::score::Aggregation;
use qrrank_core::train::TrainableScope;

mod commands;
pub mod config;

pub use commands::{load_model, load_reranker, template_of, TEMPLATE_KEY};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Core(qrrank_core::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(qrrank_core::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Usage(m) | CliError::Config(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        write!(f, "error[{}]: {}", self.category(), msg.replace('\n', " "))
    }
}

impl From<qrrank_core::Error> for CliError {
    fn from(e: qrrank_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "qrrank", version, about = "Attention-head listwise reranking toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a randomly initialized model checkpoint.
    Init(InitArgs),
    /// Generate a synthetic listwise dataset.
    GenData(GenDataArgs),
    /// Score every head on a seed set and write the top heads.
    Probe(ProbeArgs),
    /// Fine-tune a model with the group contrastive objective.
    Train(TrainArgs),
    /// Rerank every instance of a dataset.
    Rerank(RerankArgs),
    /// Report ranking metrics on one or more datasets.
    Eval(EvalArgs),
    /// Measure latency, FLOPs and memory.
    Bench(BenchArgs),
    /// Run the HTTP rerank service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_corpora: Option<usize>,
    #[arg(long)]
    pub queries_per_corpus: Option<usize>,
    /// Put the gold chunk into every shortlist.
    #[arg(long)]
    pub force_gold: bool,
    /// Prepend block summaries to each instance.
    #[arg(long)]
    pub memory: bool,
    #[arg(long)]
    pub force: bool,
}

/// Fixed head set or the model's gate.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct HeadArgs {
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long)]
    pub gated: bool,
}

/// Scoring overrides shared by rerank, eval, bench and serve.
#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub calibrate: bool,
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    /// Execute layers `0..=N` only; `auto` stops at the deepest selected head.
    #[arg(long)]
    pub truncate_after: Option<Truncation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    Auto,
    Layer(usize),
}

impl std::str::FromStr for Truncation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Truncation::Auto);
        }
        s.parse().map(Truncation::Layer).map_err(|_| format!("expected a layer index or auto, got {s:?}"))
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub seed_set: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Select evenly from layers `START:END` (half-open).
    #[arg(long)]
    pub layer_range: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every head's score.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub heads: HeadArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scope: Option<TrainableScope>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub heads: HeadArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub heads: HeadArgs,
    /// `NAME=PATH` or `PATH`; repeat for several datasets.
    #[arg(long, required = true)]
    pub data: Vec<String>,
    /// Comma-separated cut-offs.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub recall: Option<RecallDefinition>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub heads: HeadArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Benchmark on the first N instances.
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub heads: HeadArgs,
    /// Listen address; falls back to QRRANK_BIND, then the config file.
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub queue: Option<usize>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
}

/// Parses `args` and runs the chosen subcommand. Help and version requests
/// print and return `Ok`.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::usage(clap_message(&e)));
        }
    };
    commands::dispatch(cli.command)
}

/// First line of a clap error without its `error:` prefix.
fn clap_message(e: &clap::Error) -> String {
    let rendered = e.render().to_string();
    let first = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    first.trim_start_matches("error:").trim().to_string()
}

/// Rejects outputs that alias an input or each other, and existing outputs
/// unless `force` is set.
pub fn check_paths(inputs: &[&Path], outputs: &[&Path], force: bool) -> Result<(), CliError> {
    let key = |p: &Path| -> PathBuf {
        std::fs::canonicalize(p).unwrap_or_else(|_| {
            let abs = std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf());
            match (abs.parent().and_then(|d| std::fs::canonicalize(d).ok()), abs.file_name()) {
                (Some(d), Some(n)) => d.join(n),
                _ => abs,
            }
        })
    };
    let ins: Vec<PathBuf> = inputs.iter().map(|p| key(p)).collect();
    let mut seen: Vec<PathBuf> = Vec::new();
    for out in outputs {
        let k = key(out);
        if ins.contains(&k) {
            return Err(CliError::usage(format!("output {} would overwrite an input", out.display())));
        }
        if seen.contains(&k) {
            return Err(CliError::usage(format!("output {} is given twice", out.display())));
        }
        if !force && out.exists() {
            let empty_dir = out.is_dir() && std::fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false);
            if !empty_dir {
                return Err(CliError::usage(format!("{} already exists (pass --force to overwrite)", out.display())));
            }
        }
        seen.push(k);
    }
    Ok(())
}

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "headliner", version, about = "SEO headline generation pipeline")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a raw corpus, print statistics and optionally write a split.
    Ingest(IngestArgs),
    /// Derive a subword vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train the n-gram title model.
    TrainLm(TrainLmArgs),
    /// Rank keywords per article, optionally training the ranker first.
    RankKeywords(RankArgs),
    /// Generate candidate titles for articles.
    Generate(GenerateArgs),
    /// Score generated titles against references.
    Evaluate(EvaluateArgs),
    /// One-sided permutation test on two groups of per-article values.
    Permtest(PermtestArgs),
    /// Run the HTTP suggestion service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub min_body_words: Option<usize>,
    #[arg(long)]
    pub max_body_words: Option<usize>,
    #[arg(long)]
    pub min_title_words: Option<usize>,
    #[arg(long)]
    pub max_title_words: Option<usize>,
    /// Keep only these departments (repeatable).
    #[arg(long = "department")]
    pub departments: Vec<String>,
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    /// Write train/validation/test_auto/test_manual files into this directory.
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
    /// Split sizes as train,validation,test_auto,test_manual.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Number of whole words kept on top of the character pieces.
    #[arg(long)]
    pub words: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub copy_bonus: Option<f64>,
    /// Also write document frequencies of the corpus texts.
    #[arg(long)]
    pub df_output: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct KeywordSources {
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub ner: Option<PathBuf>,
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub df: Option<PathBuf>,
    #[arg(long)]
    pub rank_model: Option<PathBuf>,
    /// Externally computed keyword scores; take precedence over --rank-model.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub sources: KeywordSources,
    /// Train a ranker on the corpus titles and write it here.
    #[arg(long)]
    pub train_output: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DecodeFlags {
    #[arg(long)]
    pub r: Option<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub position_scale: Option<f64>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub n_best: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Decode without keywords (the rank penalty becomes 1).
    #[arg(long)]
    pub no_keywords: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Articles as JSON lines; `-` reads stdin.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub sources: KeywordSources,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// JSON lines with id, generated, reference.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Also compute SentenceSim (needs embeddings).
    #[arg(long)]
    pub sentence_sim: bool,
    #[arg(long)]
    pub judgements: Option<PathBuf>,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PermtestArgs {
    /// One number per line.
    #[arg(long)]
    pub group_a: PathBuf,
    #[arg(long)]
    pub group_b: PathBuf,
    #[arg(long, default_value_t = 9999)]
    pub n_perms: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub sources: KeywordSources,
    #[arg(long)]
    pub access_log: Option<PathBuf>,
    #[arg(long)]
    pub fsync: bool,
    #[arg(long = "allow-origin")]
    pub allowed_origins: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl From<clap::Error> for CliError {
    fn from(e: clap::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

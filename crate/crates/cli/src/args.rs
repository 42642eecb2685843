use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "qtl",
    version,
    about = "Span-to-sentence transfer experiments for question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert span-annotated examples into sentence-selection examples.
    Convert(ConvertArgs),
    /// Train a model, from scratch or from --init.
    Train(TrainArgs),
    /// Finetune from a pretrained checkpoint given by --init.
    TransferTrain(TrainArgs),
    /// Score data with one checkpoint or the mean of several.
    Evaluate(EvalArgs),
    /// Write the mean class distributions of several checkpoints.
    Ensemble(EvalArgs),
    /// Export attention maps and sparsity statistics.
    Analyze(AnalyzeArgs),
    /// Write a synthetic span corpus, its selection counterpart and embeddings.
    Generate(GenerateArgs),
    /// Run the whole synthetic transfer experiment.
    Synthetic(SyntheticArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Converted examples, canonical JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// One conversion record per example, JSONL.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "squad-json")]
    pub format: String,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_fraction: Option<f64>,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Text embeddings; required without --init.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Overrides the config class count.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long, default_value = "canonical-jsonl")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Repeat to ensemble.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "canonical-jsonl")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// One checkpoint, or two for a side-by-side comparison.
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "canonical-jsonl")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = qtl_core::analysis::EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n_span: usize,
    #[arg(long, default_value_t = 100)]
    pub n_select: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finetuning config; defaults to the built-in desk recipe.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretraining config; defaults to the built-in desk recipe.
    #[arg(long)]
    pub pretrain_config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n_pretrain: usize,
    #[arg(long, default_value_t = 100)]
    pub n_span_dev: usize,
    #[arg(long, default_value_t = 200)]
    pub n_finetune: usize,
    #[arg(long, default_value_t = 100)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    /// Comma-separated pretraining fractions.
    #[arg(long, default_value = "1.0", value_delimiter = ',')]
    pub pretrain_fraction: Vec<f64>,
    /// Skip the no-pretraining baseline.
    #[arg(long)]
    pub no_scratch: bool,
    #[arg(long)]
    pub out: PathBuf,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "r2dl",
    version,
    about = "Reprogram a frozen classifier for protein tasks through a sparse dictionary map"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train Θ and write it with the history, label mapping and run manifest.
    Train(TrainArgs),
    /// Evaluate a trained Θ on the test split.
    Eval(EvalArgs),
    /// Retrain on nested fractions of the training split.
    Sweep(SweepArgs),
    /// Correlate evolutionary and embedding distances.
    Distances(DistanceArgs),
    /// Write mean-pooled sequence embeddings under Θ·V_S.
    ExportEmbeddings(ExportArgs),
    /// List each target token's source tokens by coefficient magnitude.
    InspectTheta(InspectArgs),
    /// Write a synthetic source bundle, frozen model and target dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Seqclass,
    Tokclass,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResidueArg {
    Strict,
    XToPad,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Source embedding bundle directory.
    #[arg(long)]
    pub source_bundle: PathBuf,
    /// Frozen model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file (.csv with sequence,label[,split] columns, or .fasta).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Task preset name (amp, toxicity, secondary-structure, stability, homology, solubility).
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_enum)]
    pub task_kind: Option<KindArg>,
    /// Label mapping JSON; derived from the dataset when omitted.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// The CSV has no header row (columns are sequence, label).
    #[arg(long)]
    pub no_header: bool,
    #[arg(long, value_enum, default_value = "strict")]
    pub residues: ResidueArg,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the preset training split size.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Override the preset test split size.
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value = "constant")]
    pub schedule: ScheduleArg,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub reproject_every: usize,
    /// Record per-iteration wall time in history.csv.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Trained coefficient map (theta.tsv).
    #[arg(long)]
    pub theta: PathBuf,
    /// Domain sequences used in pretraining, for data efficiency.
    #[arg(long)]
    pub pretrain_corpus_size: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.8, 0.6, 0.4])]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DistanceArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long)]
    pub theta: PathBuf,
    /// Use at most this many sequences (pairwise alignment is quadratic).
    #[arg(long, default_value_t = 200)]
    pub max_sequences: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long)]
    pub theta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub theta: PathBuf,
    #[arg(long)]
    pub source_bundle: PathBuf,
    /// Entries listed per target token; all nonzeros by default.
    #[arg(long)]
    pub top: Option<usize>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

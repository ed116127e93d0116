use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "sara",
    version,
    about = "Spectrum-adaptive low-rank adapters on a tiny transformer testbed",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the rank profile (k per layer, matrix and threshold) of a checkpoint as CSV
    AnalyzeRanks(AnalyzeRanks),
    /// Train a toy transformer from scratch on a synthetic task
    Pretrain(Pretrain),
    /// Attach adapters to a pretrained model and train them
    Finetune(Finetune),
    /// Fold adapters into the base weights
    Merge(Merge),
    /// Export the averaged Mo-SARA router probabilities as a heatmap
    Routing(Routing),
    /// Run one fine-tune per value of a hyperparameter
    Sweep(Sweep),
    /// Evaluate a model on a synthetic task and print metrics as JSON
    Eval(Eval),
}

#[derive(Debug, Args)]
pub struct AnalyzeRanks {
    /// Model checkpoint (STC1)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Projection matrices to analyze
    #[arg(long, value_delimiter = ',', default_value = "Q,V")]
    pub kinds: Vec<String>,
    /// Energy thresholds
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    )]
    pub thresholds: Vec<f64>,
    /// Output CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lora,
    Sara,
    Mosara,
    Full,
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Copy,
    Reverse,
    ModularAdd,
    LangA,
    LangB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VModeArg {
    After,
    Front,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitModeArg {
    Random,
    VZero,
    SvdSeeded,
}

/// Training hyperparameters. Unset flags fall back to the config file, then
/// to the recipe.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON file with optional `model`, `train` and `task` objects [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hyperparameter recipe (math-7b, math-13b, gptj-6b, commonsense-7b, commonsense-13b, e2e, desk)
    #[arg(long, default_value = "desk")]
    pub recipe: String,
    /// Seed for every random stream of the run [default: from recipe]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak learning rate [default: from recipe]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup steps [default: from recipe]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Optimizer steps; 0 derives them from epochs [default: from recipe]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Passes over the data when --steps is 0 [default: from recipe]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Examples per step [default: from recipe]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Dropout on adapter inputs [default: from recipe]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Decoupled weight decay [default: from recipe]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Singular-value energy threshold for SARA and Mo-SARA [default: from recipe]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Mo-SARA parallel singular-value sets [default: from recipe]
    #[arg(long)]
    pub heads: Option<usize>,
    /// LoRA rank [default: from recipe]
    #[arg(long)]
    pub rank: Option<usize>,
    /// LoRA scaling [default: from recipe]
    #[arg(long)]
    pub scaling: Option<f64>,
    /// Placement of the Mo-SARA diagonal [default: from recipe]
    #[arg(long, value_enum)]
    pub v_mode: Option<VModeArg>,
    /// SARA initialization [default: from recipe]
    #[arg(long, value_enum)]
    pub init_mode: Option<InitModeArg>,
    /// Drop the SARA diagonal
    #[arg(long)]
    pub no_lambda: bool,
    /// Projections that get adapters [default: from recipe]
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    /// Inclusive layer range for adapters, e.g. 0..1 [default: all layers]
    #[arg(long, value_parser = parse_range)]
    pub layers: Option<(usize, usize)>,
}

/// Synthetic data for training and evaluation.
#[derive(Debug, Args)]
pub struct DataFlags {
    /// Task to train on [default: lang-a for pretrain, lang-b otherwise]
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Sequence length of generated examples [default: 16]
    #[arg(long)]
    pub length: Option<usize>,
    /// Training examples [default: 1024 for pretrain, 512 otherwise]
    #[arg(long)]
    pub size: Option<usize>,
    /// Held-out examples [default: 256]
    #[arg(long)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Transformer blocks [default: 2]
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Residual width [default: 32]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Vocabulary size [default: 16]
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Longest input sequence [default: 16]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Feed-forward width multiplier [default: 4]
    #[arg(long)]
    pub ffn_mult: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Output model checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV [default: not written]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Finetune {
    /// Pretrained model checkpoint
    #[arg(long)]
    pub base: PathBuf,
    /// Fine-tuning method
    #[arg(long, value_enum, default_value = "sara")]
    pub method: MethodArg,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Run directory for adapter.stc, log.csv and config.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Merge {
    /// Pretrained model checkpoint
    #[arg(long)]
    pub base: PathBuf,
    /// Adapter checkpoint from a run directory
    #[arg(long)]
    pub adapter: PathBuf,
    /// Output model checkpoint
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Routing {
    /// Run directory or adapted model checkpoint
    #[arg(long)]
    pub model: PathBuf,
    /// Tasks whose first example forms the probe batch
    #[arg(long, value_enum, value_delimiter = ',', default_value = "lang-a,lang-b")]
    pub probe: Vec<TaskArg>,
    /// Sequence length of the probe examples
    #[arg(long, default_value_t = 8)]
    pub length: usize,
    /// Projection whose router to read
    #[arg(long, default_value = "Q")]
    pub kind: String,
    /// Output files; `.pgm` paths get an image, anything else CSV
    #[arg(long, value_delimiter = ',', required = true)]
    pub out: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Threshold,
    Heads,
    Scaling,
    Layers,
}

#[derive(Debug, Args)]
pub struct Sweep {
    /// Hyperparameter to vary
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Values to try; layer groups are written A..B
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Pretrained model checkpoint
    #[arg(long)]
    pub base: PathBuf,
    /// Fine-tuning method [default: mosara for threshold and heads, lora for scaling, sara for layers]
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
    /// Worker threads; 0 uses every core
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Model checkpoint or run directory
    #[arg(long)]
    pub model: PathBuf,
    /// Task to evaluate on
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Sequence length of generated examples
    #[arg(long, default_value_t = 16)]
    pub length: usize,
    /// Number of examples
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Also write every logit as CSV (example,position,token,value) [default: not written]
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Seed for the evaluation data
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

pub fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start in `{s}`"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad range end in `{s}`"))?;
    if a > b {
        return Err(format!("empty range `{s}`"));
    }
    Ok((a, b))
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clspool::data::TaskKind;

#[derive(Debug, Parser)]
#[command(
    name = "clspool",
    version,
    about = "Train and compare [CLS] aggregation heads on desk-scale tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one (head, seed) pair; writes a checkpoint and metrics JSON
    Train(TrainArgs),
    /// Train every (head, seed) pair and tabulate per-head mean and std
    Compare(CompareArgs),
    /// Sweep the pooling depth k of one head family
    #[command(name = "ablate-k")]
    AblateK(AblateArgs),
    /// Repeat the comparison on subsampled training sets
    Lowres(LowresArgs),
    /// Check head and embedding gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Evaluate a saved checkpoint
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Synthetic task: pattern, majority or pair
    #[arg(long, value_name = "NAME", value_parser = parse_task, conflicts_with = "data")]
    pub task: Option<TaskKind>,
    /// JSONL training data (`tokens` or `text`/`text_pair` plus `label`)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// JSONL evaluation data; without it part of --data is held out
    #[arg(long, value_name = "PATH", requires = "data")]
    pub eval_data: Option<PathBuf>,
    /// Vocabulary file for text datasets, one token per line
    #[arg(long, value_name = "PATH", requires = "data")]
    pub vocab: Option<PathBuf>,
    /// Fraction of --data held out when --eval-data is absent
    #[arg(long, value_name = "FRAC", default_value_t = 0.2)]
    pub eval_fraction: f64,
    /// Synthetic training set size
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub train_size: Option<u64>,
    /// Synthetic evaluation set size
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub eval_size: Option<u64>,
    /// Synthetic content length (tokens after [CLS])
    #[arg(long, value_name = "LEN", value_parser = clap::value_parser!(u64).range(1..))]
    pub seq_len: Option<u64>,
    /// Synthetic vocabulary size, reserved ids included
    #[arg(long, value_name = "N")]
    pub vocab_size: Option<usize>,
    /// Seed for task generation, holdout splits and subsampling
    #[arg(long, value_name = "SEED", default_value_t = 0)]
    pub data_seed: u64,
}

impl DataArgs {
    pub fn has_source(&self) -> bool {
        self.task.is_some() || self.data.is_some()
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Flat key=value file; flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "FRAC")]
    pub warmup_ratio: Option<f64>,
    #[arg(long, value_name = "RATE")]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm cap (0 disables)
    #[arg(long, value_name = "NORM")]
    pub clip_norm: Option<f64>,
    #[arg(long, value_name = "RATE")]
    pub dropout: Option<f64>,
    /// Encoder depth N
    #[arg(long, value_name = "N")]
    pub layers: Option<usize>,
    /// Random seed (repeatable); defaults to CLSPOOL_SEED
    #[arg(long, value_name = "SEED", env = "CLSPOOL_SEED", value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "clspool-out")]
    pub out: PathBuf,
    /// Concurrent training runs (defaults to available cores)
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct HeadFlags {
    /// Head spec, e.g. baseline, maxcls:k=3, mha:h=4, maxseq+mha:k=3,h=4 (repeatable)
    #[arg(long = "head", value_name = "SPEC")]
    pub head: Vec<String>,
    /// Pooling depth used when a spec omits k
    #[arg(long, value_name = "K")]
    pub k: Vec<usize>,
    /// Attention heads used when a spec omits h
    #[arg(long, value_name = "H")]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub heads: HeadFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub heads: HeadFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Maxcls,
    Maxseq,
    Meanseq,
    Normseq,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Depths to try (repeatable); defaults to 1..=N
    #[arg(long, value_name = "K")]
    pub k: Vec<usize>,
    /// Attention heads of the added layer
    #[arg(long, value_name = "H")]
    pub heads: Option<usize>,
    /// Head family whose depth is varied
    #[arg(long, value_enum, default_value_t = Family::Maxseq)]
    pub family: Family,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct LowresArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub heads: HeadFlags,
    /// Training-set sizes: positive integers or `full` (comma-separated or repeated)
    #[arg(long, value_name = "SIZES", value_delimiter = ',', required = true, value_parser = parse_size)]
    pub sizes: Vec<Size>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Size {
    Full,
    N(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Bits {
    #[value(name = "32")]
    B32,
    #[value(name = "64")]
    B64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negate the gradient routed through max pooling
    FlipMaxSign,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Floating-point width; 32-bit loosens the tolerance to 1e-2
    #[arg(long, value_enum, default_value_t = Bits::B64)]
    pub bits: Bits,
    #[arg(long, value_name = "SEED", env = "CLSPOOL_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Inject a known-wrong backward rule to confirm the check fails
    #[arg(long, value_enum, hide = true)]
    pub fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Write the metrics JSON here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: clspool::Error| e.to_string())
}

fn parse_size(s: &str) -> Result<Size, String> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(Size::Full);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("size must be at least 1".into()),
        Ok(n) => Ok(Size::N(n)),
        Err(_) => Err(format!("`{s}` is neither a positive integer nor `full`")),
    }
}

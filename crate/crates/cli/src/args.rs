use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use crossvae::data::RatingFormat;
use crossvae::eval::RankOver;
use crossvae::model::{AttentionMode, AttentionNorm, Hyperparams, LatentInput, Schedule};

#[derive(Debug, Parser)]
#[command(
    name = "crossvae",
    version,
    about = "Variational Bayesian matrix factorization with cross-fed user/item encoders",
    after_help = "Every option can also be set in a flat TOML file passed with --config \
                  (keys are option names, e.g. `k = 5` or `widths = [50, 50]`). \
                  Command-line flags win over the file."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, split, train to convergence, and write checkpoint, log and metrics.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on the split derived from the dataset and seed.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Train the full model and its three ablations on one split.
    #[command(args_override_self = true)]
    Ablate(ExperimentArgs),
    /// Train on random subsamples of increasing size.
    #[command(args_override_self = true)]
    Sparsity(SparsityArgs),
    /// Check every analytic gradient against finite differences.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Write a random fraction of the ratings and the remainder as CSV files.
    #[command(args_override_self = true)]
    Subsample(SubsampleArgs),
    /// Write the 70/15/15 split manifest and id maps.
    #[command(args_override_self = true)]
    Split(SplitArgs),
    /// Write a synthetic low-rank rating matrix as a CSV dataset.
    #[command(args_override_self = true)]
    Synthetic(SyntheticArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Sparsity(_) => "sparsity",
            Command::Gradcheck(_) => "gradcheck",
            Command::Subsample(_) => "subsample",
            Command::Split(_) => "split",
            Command::Synthetic(_) => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// Flat TOML file with option values; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Rating file.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// File layout: double_colon (`u::i::r::t`), csv (with header) or amazon (no header).
    #[arg(long, default_value = "double_colon", value_parser = parse_format)]
    pub format: RatingFormat,
    /// Drop users and items with fewer ratings, repeated to a fixed point.
    #[arg(long, default_value_t = 1)]
    pub min_ratings: usize,
    /// Seed for the split and for model initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Embedding dimension K.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Width K′ of each input path's output.
    #[arg(long, default_value_t = 10)]
    pub k_prime: usize,
    /// Hidden layers after the concatenation (L).
    #[arg(long, default_value_t = 0)]
    pub layers: usize,
    /// Hidden layers on each input path (L′).
    #[arg(long, default_value_t = 1)]
    pub layers_prime: usize,
    /// Hidden widths, comma separated; the last repeats.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "50")]
    pub widths: Vec<usize>,
    /// KL weight on the user side.
    #[arg(long, default_value_t = 1e-3)]
    pub beta_u: f64,
    /// KL weight on the item side.
    #[arg(long, default_value_t = 1e-3)]
    pub beta_v: f64,
    /// Users per batch [default: 100 if min(users, items) ≤ 10000, else 1000].
    #[arg(long)]
    pub batch_users: Option<usize>,
    /// Items per batch [default: as for --batch-users].
    #[arg(long)]
    pub batch_items: Option<usize>,
    /// Attention over counterpart embeddings: local, global or off.
    #[arg(long, default_value = "local", value_parser = parse_attention)]
    pub attention: AttentionMode,
    /// Normalize attention scores with softmax instead of their sum.
    #[arg(long)]
    pub attention_softmax: bool,
    /// Update all user batches, then all item batches, instead of nested blocks.
    #[arg(long)]
    pub sequential: bool,
    /// Drop the latent input path (counterpart embeddings).
    #[arg(long)]
    pub no_cross_feedback: bool,
    /// Drop the observed-ratings input path.
    #[arg(long)]
    pub no_data_input: bool,
    /// Latent input: concat (masked concatenation) or average (mean of rated embeddings).
    #[arg(long, default_value = "concat", value_parser = parse_latent)]
    pub latent_input: LatentInput,
    /// Mean of the initial embedding tables.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub init_mu: f64,
    /// Standard deviation of the initial embedding tables.
    #[arg(long, default_value_t = 0.1)]
    pub init_sigma: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Cap on outer iterations.
    #[arg(long, default_value_t = 100)]
    pub max_iterations: usize,
    /// Stop after this many iterations without a validation improvement.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
}

impl ModelArgs {
    pub fn hyperparams(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            k: self.k,
            k_prime: self.k_prime,
            layers: self.layers,
            layers_prime: self.layers_prime,
            widths: self.widths.clone(),
            beta_u: self.beta_u,
            beta_v: self.beta_v,
            batch_users: self.batch_users,
            batch_items: self.batch_items,
            attention: self.attention,
            attention_norm: if self.attention_softmax {
                AttentionNorm::Softmax
            } else {
                AttentionNorm::Ratio
            },
            cross_feedback: !self.no_cross_feedback,
            data_input: !self.no_data_input,
            latent_input: self.latent_input,
            schedule: if self.sequential {
                Schedule::Sequential
            } else {
                Schedule::Nested
            },
            init_mu: self.init_mu,
            init_sigma: self.init_sigma,
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            max_iterations: self.max_iterations,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Rank each user's held-out items among themselves (test) or among all unrated items (full).
    #[arg(long, default_value = "test", value_parser = parse_rank_over)]
    pub rank_over: RankOver,
    /// Cutoffs N for Recall@N and NDCG@N.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "20,50")]
    pub cutoffs: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory; every file is written below it.
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// Also draw SVG charts of the convergence curves.
    #[arg(long)]
    pub charts: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Continue from a checkpoint; --max-iterations and --patience still apply.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Checkpoint to evaluate [default: <out>/checkpoint.json].
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Train the runs concurrently (results are identical).
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SparsityArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Training fractions, comma separated.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "0.01,0.02,0.03,0.05,0.1")]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Scale the backward rule of this op (harness self-test).
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SubsampleArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Share of the ratings to sample, in (0, 1).
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 300)]
    pub items: usize,
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    /// Share of observed cells.
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    /// Standard deviation of the rating noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Output directory; the ratings go to <out>/ratings.csv.
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
}

fn parse_format(s: &str) -> Result<RatingFormat, String> {
    s.parse().map_err(|e: crossvae::Error| e.to_string())
}

fn parse_attention(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: crossvae::Error| e.to_string())
}

fn parse_latent(s: &str) -> Result<LatentInput, String> {
    s.parse().map_err(|e: crossvae::Error| e.to_string())
}

fn parse_rank_over(s: &str) -> Result<RankOver, String> {
    s.parse().map_err(|e: crossvae::Error| e.to_string())
}

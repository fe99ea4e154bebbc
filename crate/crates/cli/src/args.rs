use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "rstca",
    version,
    about = "Bayer demosaicing with a residual Swin transformer channel-attention network"
)]
pub struct Cli {
    /// Read option defaults from a key=value file (flags given on the command line win)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network on random patches of an image directory
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Demosaic one image with a checkpoint or the bilinear baseline
    #[command(args_override_self = true)]
    Demosaic(DemosaicArgs),
    /// Score a method on an image directory (cPSNR and SSIM)
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Build the variants of an ablation grid and compare them
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

pub const VARIANTS: [&str; 4] = ["B", "S", "L", "tiny"];

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Architecture preset
    #[arg(long, default_value = "B", value_parser = VARIANTS, ignore_case = true)]
    pub variant: String,

    /// Override one architecture field, e.g. `--set ca_mode=single` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct OptionalModelArgs {
    /// Architecture the checkpoint must match (default: the one stored in it)
    #[arg(long, value_parser = VARIANTS, ignore_case = true)]
    pub variant: Option<String>,

    /// Override one architecture field of --variant (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", requires = "variant")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Directory of training images (PNG or TIFF)
    #[arg(long, env = "RSTCA_DATA_DIR", value_name = "DIR")]
    pub dataset: Option<PathBuf>,

    /// Output directory for the loss log, checkpoint and resolved config
    #[arg(long, default_value = "runs/train", value_name = "DIR")]
    pub out: PathBuf,

    /// Total number of iterations (a resumed run continues up to this count)
    #[arg(long, default_value_t = 1000)]
    pub iters: u64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value_t = 16)]
    pub batch: usize,

    /// Square patch side in pixels (even)
    #[arg(long, default_value_t = 64)]
    pub patch: usize,

    /// Initial learning rate
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    /// Iterations between learning-rate halvings [default: 40000 for B and tiny, 100000 for S, 200000 for L]
    #[arg(long)]
    pub halving_period: Option<u64>,

    /// Save a checkpoint every N iterations (0: only at the end)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,

    /// Continue from a checkpoint written by an earlier run
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,

    /// Disable random rotations and flips
    #[arg(long)]
    pub no_augment: bool,

    /// Batches prepared ahead of the trainer
    #[arg(long, default_value_t = 2)]
    pub prefetch: usize,

    /// Decoupled weight decay
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,

    /// Clip the global gradient norm to this value
    #[arg(long)]
    pub clip_grad_norm: Option<f64>,

    /// Keep an exponential moving average of the weights with this decay
    #[arg(long)]
    pub ema_decay: Option<f64>,

    /// Log the loss every N iterations
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DemosaicMethod {
    /// Trained network checkpoint
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,

    /// Classical method instead of a network
    #[arg(long, value_parser = ["bilinear"])]
    pub baseline: Option<String>,
}

#[derive(Debug, Args)]
pub struct DemosaicArgs {
    #[command(flatten)]
    pub method: DemosaicMethod,

    #[command(flatten)]
    pub model: OptionalModelArgs,

    /// Input image: RGB (mosaiced internally) or, with --raw, a single-channel RGGB mosaic
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,

    /// Output PNG
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,

    /// Treat the input as a raw RGGB mosaic
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct EvalMethod {
    /// Trained network checkpoint
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,

    /// Classical method instead of a network
    #[arg(long, value_parser = ["bilinear"])]
    pub baseline: Option<String>,

    /// Score the ground truth against itself
    #[arg(long)]
    pub self_test: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub method: EvalMethod,

    #[command(flatten)]
    pub model: OptionalModelArgs,

    /// Directory of reference images
    #[arg(long, env = "RSTCA_DATA_DIR", value_name = "DIR")]
    pub dataset: Option<PathBuf>,

    /// Write the per-image CSV report here
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,

    /// Border pixels excluded from the metrics
    #[arg(long, default_value_t = 0)]
    pub crop: usize,

    /// Round outputs to 8-bit levels before scoring
    #[arg(long)]
    pub quantize: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Which study to build
    #[arg(long, value_parser = ["ca", "ssc", "conv", "heads"])]
    pub grid: String,

    /// Write the comparison CSV here
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,

    /// Side of the synthetic mosaic used for a forward check (0 skips it)
    #[arg(long, default_value_t = 64)]
    pub forward_size: usize,

    /// Train each variant this many iterations (needs --dataset)
    #[arg(long, default_value_t = 0)]
    pub train_iters: u64,

    /// Directory of training images for --train-iters
    #[arg(long, env = "RSTCA_DATA_DIR", value_name = "DIR")]
    pub dataset: Option<PathBuf>,

    #[arg(long, default_value_t = 4)]
    pub batch: usize,

    #[arg(long, default_value_t = 64)]
    pub patch: usize,

    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "mixres",
    version,
    about = "Train and evaluate pre-activation GELU ResNets with mixup"
)]
pub struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write its run log, summaries and checkpoints.
    Train(TrainCmd),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalCmd),
    /// Hyperparameter search with hyperband early stopping.
    Sweep(SweepCmd),
    /// Train the same configuration with and without mixup.
    CompareMixup(CompareCmd),
    /// Write two training images and their mixture as PPM files.
    MixupPreview(PreviewCmd),
    /// Check every differentiable op against finite differences.
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory holding the CIFAR-10 binary batch files
    /// (default: $MIXRES_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training images (the test split is capped at N
    /// too unless --test-subset is given).
    #[arg(long)]
    pub subset: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_subset: Option<usize>,
}

/// Training options; each overrides the config file, which overrides the
/// built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// TOML file with training options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Bottleneck width of the first stage.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cosine schedule length in epochs (default: the epoch count).
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub eta_min: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Beta distribution shape for mixup.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Disable mixup.
    #[arg(long)]
    pub no_mixup: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["mean", "sum"])]
    pub loss_reduction: Option<String>,
    #[arg(long)]
    pub crop_pad: Option<usize>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Resnet50,
    Tiny,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Self::Resnet50 => "resnet50",
            Self::Tiny => "tiny",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Print the final summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected architecture; a checkpoint for a different one is rejected.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// TOML training config whose model section the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SweepCmd {
    /// Sweep spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Trials trained concurrently within a rung.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score trials on the test split instead of a held-out training slice.
    #[arg(long)]
    pub sweep_on_test: bool,
    #[arg(long)]
    pub validation_size: Option<usize>,
    #[arg(long, default_value = "runs/sweep")]
    pub out: PathBuf,
    /// Print the effective spec and the rung table, then exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct CompareCmd {
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "runs/compare")]
    pub out: PathBuf,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct PreviewCmd {
    /// Index of the first image.
    pub a: usize,
    /// Index of the second image.
    pub b: usize,
    /// Weight of the first image.
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs/preview")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    /// Restrict to this op (repeatable).
    #[arg(long = "op")]
    pub ops: Vec<String>,
    /// Random shapes per op and precision.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::Both)]
    pub precision: Precision,
    #[arg(long)]
    pub json: bool,
    /// Test hook: perturb the analytic gradient of this op.
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<String>,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bws", version, about = "Scribble-supervised segmentation with a latent-variable generator and MC-dropout inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with scribbles.
    Simulate(SimulateArgs),
    /// Stage 1: train the generator on scribbles.
    TrainGen(TrainGenArgs),
    /// Sample dense pseudo-labels from a trained generator.
    PseudoLabel(PseudoLabelArgs),
    /// Stage 2: train the segmentation network.
    TrainSeg(TrainSegArgs),
    /// MC-dropout inference with per-pixel entropy.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Ablation grid over loss terms, N or T.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks of every loss.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value file whose keys mirror the flag names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training and inference hyperparameters.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long, alias = "t")]
    pub t_infer: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub dropout: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub sigma_xy: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub sigma_int: Option<f64>,
    /// Side of the random CRF window; 0 evaluates the full image.
    #[arg(long)]
    pub crf_crop: Option<usize>,
    /// Draw pseudo-label latents from N(0, I) instead of q(z|x).
    #[arg(long)]
    pub prior_z: bool,
    /// Divide the partial cross-entropy by the labelled-pixel count.
    #[arg(long)]
    pub normalize_pce: bool,
    /// adam or sgd-poly.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// f64 (default) or f32.
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub noise: Option<f64>,
    /// Perturb scribble skeletons by up to one pixel.
    #[arg(long)]
    pub jitter: bool,
}

#[derive(Args, Debug)]
pub struct TrainGenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Dataset root written by `simulate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PseudoLabelArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// pseudo (needs --labels), dense or scribbles.
    #[arg(long)]
    pub supervision: Option<String>,
    /// Directory of dense label maps `<id>.pgm` for pseudo supervision.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Segmentation checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of predicted label maps `<id>.pgm`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Leave class 0 out of the macro average.
    #[arg(long)]
    pub exclude_background: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// losses, n or t.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values for the n or t axis.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    pub instances: Option<usize>,
}

//! `ftseg`: synthetic data, training, evaluation, ablations, gradient checks
//! and focal-curve tables.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::List;

#[derive(Debug, Parser)]
#[command(name = "ftseg", version, about = "Focal Tversky attention U-Net toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset as PNG images and masks.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and per-epoch history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the loss/architecture ablation grid.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Tabulate the focal Tversky loss against the Tversky index.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// bus-like or isic-like.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Smallest lesion area fraction.
    #[arg(long)]
    area_min: Option<f64>,
    /// Largest lesion area fraction.
    #[arg(long)]
    area_max: Option<f64>,
    /// Lesion intensity shift.
    #[arg(long, allow_hyphen_values = true)]
    contrast: Option<f64>,
    /// Gaussian noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Resample every sample to HxW.
    #[arg(long)]
    size: Option<String>,
}

#[derive(Debug, Args)]
struct ArchArgs {
    /// Encoder stages.
    #[arg(long)]
    depth: Option<usize>,
    /// Channels of the first stage, doubled per stage.
    #[arg(long)]
    base_channels: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// unet, attn_unet or attn_unet_multi_input.
    #[arg(long)]
    variant: Option<String>,
    /// One head per decoder scale (default: on for attention variants).
    #[arg(long)]
    deep_supervision: Option<bool>,
}

#[derive(Debug, Args)]
struct LossArgs {
    /// dl, tl or ftl.
    #[arg(long)]
    loss: Option<String>,
    /// False-negative weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// False-positive weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Focal parameter in [1, 3].
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Inverse-time learning-rate decay per epoch.
    #[arg(long)]
    decay: Option<f64>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Clip each batch gradient to this global L2 norm.
    #[arg(long)]
    clip: Option<f64>,
    /// Seed for initialisation and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Smoothing constant of the overlap losses.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Focal exponent convention: as_printed (1/gamma) or direct (gamma).
    #[arg(long)]
    exponent: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for model.ckpt and history.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    loss: LossArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Fraction used for training; the rest validates. 1 trains on all.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Seed of the train/validation split (default: --seed).
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for metrics.csv, per_image.csv and overlays.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Write prediction, mask and disagreement PNGs per image.
    #[arg(long)]
    overlays: Option<bool>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated row labels (default: all seven).
    #[arg(long)]
    rows: Option<List<String>>,
    /// cv (k-fold on the training split) or holdout (one run per seed).
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Seeds of the hold-out runs.
    #[arg(long)]
    seeds: Option<List<u64>>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scope {
    Losses,
    Gate,
    Model,
    All,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    scope: Scope,
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated gammas in [1, 3].
    #[arg(long)]
    gammas: Option<List<f64>>,
    /// Samples of the Tversky index on [0, 1].
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    exponent: Option<String>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Curve(a) => commands::curve(a),
    };
    match result {
        Ok(()) => ExitCode::from(error::exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `nobias` command-line runner.

mod commands;
mod datadir;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nobias_core::attribution::{ChannelReduction, Method};
use serde::Serialize;

/// Exit status for a completed run whose report is flagged invalid.
pub const EXIT_INVALID: u8 = 4;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(name = "nobias", version, about = "Saliency attribution and input-bias audits on small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a classifier or an encoder/decoder pair.
    Train(TrainArgs),
    /// Compute a saliency map for one image.
    Attribute(AttributeArgs),
    /// Central finite-difference gradient of the target score (reference oracle).
    FdGradient(FdArgs),
    /// Audit saliency bias: a full study, or a trained model on a dataset.
    Audit(AuditArgs),
    /// Render a saliency map as a PPM heatmap.
    Render(RenderArgs),
    /// Build a concept vector from a labeled dataset and an encoder.
    ConceptBuild(ConceptBuildArgs),
    /// Saliency of a concept score for one image.
    ConceptAttribute(ConceptAttributeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Blackbox,
    Grey,
    Concept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// v / 255
    Unit,
    /// v / 255 - 0.5
    Centered,
}

impl Scaling {
    pub fn affine(self) -> nobias_core::experiments::AffineScaling {
        match self {
            Scaling::Unit => nobias_core::experiments::AffineScaling::UNIT,
            Scaling::Centered => nobias_core::experiments::AffineScaling::CENTERED,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "blackbox")]
    pub kind: DataKind,
    /// Number of images (default 1200, or 600 for concept data).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Channels of black-box images (grey images always have 3, concept images 1).
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Side of the black box, or of the grey object.
    #[arg(long, default_value_t = 8)]
    pub box_size: usize,
    /// Share of images that carry the box, object or patch.
    #[arg(long, default_value_t = 0.5)]
    pub box_fraction: f64,
    /// Value-noise lattice spacing in pixels.
    #[arg(long, default_value_t = 8)]
    pub cell_size: usize,
    /// Background value range (default 0.2..1.0, or 0.4..1.0 for concept data).
    #[arg(long)]
    pub noise_low: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub noise_high: f64,
    /// Byte distance between middle grey and the grey study's background.
    #[arg(long, default_value_t = 40.0)]
    pub grey_gap: f64,
    /// Pixel preprocessing for grey data.
    #[arg(long, value_enum, default_value = "centered")]
    pub scaling: Scaling,
    #[arg(long, default_value_t = 6)]
    pub patch_height: usize,
    #[arg(long, default_value_t = 14)]
    pub patch_width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Classifier,
    Encoder,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Shuffling seed.
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    /// Parameter initialization seed.
    #[arg(long, default_value_t = 0)]
    pub net_seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "classifier")]
    pub arch: Arch,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Images used for training; the rest form the test split (default: 5/6 of the data).
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Classifier convolution widths.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub decoder_hidden: usize,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Decoder checkpoint to continue from (encoder training).
    #[arg(long)]
    pub resume_decoder: Option<PathBuf>,
    /// Checkpoint path; the report, manifest and decoder are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauPolicy {
    Percentile,
    Absolute,
}

#[derive(Debug, Args, Serialize)]
pub struct ThresholdFlags {
    #[arg(long, value_enum, default_value = "percentile")]
    pub tau_policy: TauPolicy,
    /// Per-layer quantile for the percentile policy.
    #[arg(long, default_value_t = nobias_core::attribution::DEFAULT_PERCENTILE)]
    pub q: f64,
    /// Threshold for the absolute policy.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Mean,
    MeanAbs,
    None,
}

impl Reduction {
    pub fn mode(self) -> Option<ChannelReduction> {
        match self {
            Reduction::Mean => Some(ChannelReduction::Mean),
            Reduction::MeanAbs => Some(ChannelReduction::MeanAbs),
            Reduction::None => None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ImageFlags {
    /// Image file: NBT1 tensor (C x H x W, used as is) or binary PGM/PPM.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Preprocessing applied to PGM/PPM pixel bytes.
    #[arg(long, value_enum, default_value = "unit")]
    pub scaling: Scaling,
    /// Dataset directory to take the image from (with --index).
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub image: ImageFlags,
    #[arg(long)]
    pub method: Method,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
    /// Class index, or a concept vector file.
    #[arg(long, default_value = "1")]
    pub target: String,
    #[arg(long, value_enum, default_value = "mean")]
    pub reduction: Reduction,
    /// Scores tensor path; the sidecar is written with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FdArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub image: ImageFlags,
    #[arg(long, default_value = "1")]
    pub target: String,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Blackbox,
    Grey,
    Concept,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    /// Generate data, train and audit from scratch.
    #[arg(long, value_enum, conflicts_with_all = ["model", "data"])]
    pub study: Option<Study>,
    /// Trained model to audit on --data.
    #[arg(long, requires = "data")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub data: Option<PathBuf>,
    /// Concept vector, when --model is an encoder.
    #[arg(long, requires = "model")]
    pub concept: Option<PathBuf>,
    /// Audit only images from this index on (the test split of a trained model).
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "vanilla,guided,rectgrad,nobias,inputxgrad")]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
    #[arg(long, default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    #[arg(long, default_value_t = 0.98)]
    pub accuracy_floor: f64,
    /// Suppression reference values (a grey study always uses scaled middle grey).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub reference_values: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub band_half_width: f64,
    #[arg(long, default_value_t = 4096)]
    pub scatter_cap: usize,
    /// Study data seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Study image count (default: the study's own).
    #[arg(long)]
    pub n: Option<usize>,
    /// Study training overrides (default: the study's own).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub net_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Colormap {
    Diverging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    /// Saturate at --percentile of |score|.
    Percentile,
    /// Saturate at max |score|.
    Max,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "diverging")]
    pub colormap: Colormap,
    #[arg(long, value_enum, default_value = "percentile")]
    pub normalize: Normalize,
    #[arg(long, default_value_t = nobias_core::render::SATURATION_PERCENTILE)]
    pub percentile: f64,
    /// Channel reduction for C x H x W scores.
    #[arg(long, value_enum)]
    pub reduce: Option<Reduction>,
}

#[derive(Debug, Args, Serialize)]
pub struct ConceptBuildArgs {
    /// Encoder checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose label 1 marks the attribute.
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first n images (the training split).
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Concept tensor path; the sidecar is written with a .json extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ConceptAttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub concept: PathBuf,
    #[command(flatten)]
    pub image: ImageFlags,
    #[arg(long)]
    pub method: Method,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
    #[arg(long, value_enum, default_value = "mean")]
    pub reduction: Reduction,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a completed command reports back.
pub enum Status {
    Ok,
    Invalid(String),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<nobias_core::Error>() {
            return match e {
                nobias_core::Error::Invalid(_) | nobias_core::Error::Shape(_) => EXIT_USAGE,
                nobias_core::Error::Format(_) | nobias_core::Error::Io(_) | nobias_core::Error::Json(_) => EXIT_IO,
                nobias_core::Error::Diverged(_) | nobias_core::Error::Empty(_) => EXIT_OTHER,
            };
        }
        if cause.is::<commands::UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Attribute(a) => commands::attribute(a),
        Command::FdGradient(a) => commands::fd_gradient(a),
        Command::Audit(a) => commands::audit(a),
        Command::Render(a) => commands::render(a),
        Command::ConceptBuild(a) => commands::concept_build(a),
        Command::ConceptAttribute(a) => commands::concept_attribute(a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Invalid(why)) => {
            eprintln!("warning: {why}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

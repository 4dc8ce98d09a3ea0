use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "vita", version, about = "Amodal segmentation: data generation, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic layered-scene dataset.
    Generate(GenerateArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict amodal and occluded masks for one image and visible mask.
    Predict(PredictArgs),
    /// Train and evaluate one dual-head model per occluded-loss weight.
    Sweep(SweepArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Single,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub side: usize,
    #[arg(long, default_value_t = 8)]
    pub objects_min: usize,
    #[arg(long, default_value_t = 12)]
    pub objects_max: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Skip occlusion-mix steering and the mix check.
    #[arg(long)]
    pub no_steer: bool,
}

/// Options shared by `train` and `sweep`.
#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Defaults to the preset's learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_a: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on the first N instances of the split only.
    #[arg(long)]
    pub max_instances: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[arg(long, value_enum, default_value_t = Arch::Dual)]
    pub arch: Arch,
    /// Defaults to 0.25 for the dual head and 0 for the single head.
    #[arg(long)]
    pub lambda_o: Option<f64>,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.5)]
    pub thr: f64,
    #[arg(long, default_value = "eval_report.json")]
    pub report: PathBuf,
    /// Shuffles the timing order only.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Scene-size visible mask of the target instance (binary PGM).
    #[arg(long)]
    pub visible_mask: PathBuf,
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub thr: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub thr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "gradcheck.json")]
    pub report: PathBuf,
}

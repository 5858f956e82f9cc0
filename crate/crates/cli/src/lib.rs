//! Command-line driver: dataset generation, training, inference, evaluation,
//! loss ablation, task-error curves and calibration reports.

pub mod check;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pedloc::net::LossKind;

use config::{Method, Pose};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pedloc", version, about = "Pedestrian distance estimation with confidence intervals")]
pub struct Cli {
    /// TOML file with one section per command; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also write CSV files shaped for plotting.
    #[arg(long, global = true)]
    pub emit_plot_data: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/val/test JSONL).
    Gen(GenArgs),
    /// Train the distance network.
    Train(TrainArgs),
    /// Predict distances and intervals for an annotation file.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare losses over seeds next to the geometric baseline.
    Ablate(AblateArgs),
    /// Expected localization error caused by height variation.
    Taskerror(TaskErrorArgs),
    /// Interval coverage and high-risk analysis.
    Calib(CalibArgs),
}

#[derive(Debug, Args, Default)]
pub struct GenArgs {
    /// Total number of samples over all splits.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub pose: Option<Pose>,
    /// Pixel noise std.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub d_min: Option<f64>,
    #[arg(long)]
    pub d_max: Option<f64>,
    /// Probability that a joint is reported missing.
    #[arg(long)]
    pub joint_dropout: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct NetArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub p_drop: Option<f64>,
    /// Multiplier on the dropout-derived weight regularizer.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Directory with train.jsonl and optionally val.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path; the history CSV goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Default)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Annotation JSONL to predict.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Predictions JSONL.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Stochastic forward passes.
    #[arg(long)]
    pub passes: Option<usize>,
    /// Laplace samples per pass.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Test-time dropout probability (defaults to the model's).
    #[arg(long)]
    pub p_drop: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct ReportArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Annotation JSONL with ground truth.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Width of the distance bins in the spread tables.
    #[arg(long)]
    pub bin_width: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub report: ReportArgs,
    /// Check the accuracy and calibration criteria; exit with 3 on failure.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args, Default)]
pub struct CalibArgs {
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Args, Default)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub losses: Option<Vec<LossKind>>,
    #[command(flatten)]
    pub net: NetArgs,
}

#[derive(Debug, Args, Default)]
pub struct TaskErrorArgs {
    #[arg(long)]
    pub d_max: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reference height in cm (defaults to the mixture mean).
    #[arg(long)]
    pub h_mean: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = config::ConfigFile::load(cli.config.as_deref())?;
    let plots = cli.emit_plot_data;
    match cli.command {
        Command::Gen(a) => commands::gen(&file, a, plots),
        Command::Train(a) => commands::train(&file, a, plots),
        Command::Infer(a) => commands::infer(&file, a),
        Command::Eval(a) => commands::eval(&file, a, plots),
        Command::Ablate(a) => commands::ablate(&file, a),
        Command::Taskerror(a) => commands::taskerror(&file, a),
        Command::Calib(a) => commands::calib(&file, a, plots),
    }
}

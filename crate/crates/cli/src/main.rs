//! `lrpkit` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "lrpkit",
    version,
    about = "Explain, visualize and evaluate small ReLU network classifiers",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Seed for every random choice; falls back to the RK_SEED variable.
    #[arg(long, global = true, env = "RK_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a classifier and save it as a model file.
    Train(TrainArgs),
    /// Compute a heatmap for one input.
    Explain(ExplainArgs),
    /// Synthesize a class prototype by activation maximization.
    Prototype(PrototypeArgs),
    /// Pixel-flipping and continuity metrics over a dataset.
    Evaluate(EvaluateArgs),
    /// Render a heatmap CSV as a PPM image.
    Render(RenderArgs),
}

/// Where samples come from: an IDX image/label pair or a synthetic set.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// IDX image file (magic 0x00000803).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file (magic 0x00000801).
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Use N samples per class of the two-Gaussian-blob toy set instead.
    #[arg(long, conflicts_with = "images")]
    pub blobs: Option<usize>,
    /// Skip this many samples at the start of the file.
    #[arg(long, default_value_t = 0)]
    pub skip: usize,
    /// Use at most this many samples.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Dense ReLU network with one hidden layer.
    Mlp,
    /// Conv 5×5 → ReLU → 2×2 sum pool → Dense.
    Conv,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Arch::Conv)]
    pub arch: Arch,
    /// Hidden units (mlp) or feature maps (conv).
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Keep every bias non-positive during training.
    #[arg(long)]
    pub nonpositive_bias: bool,
    /// Store the pixel box `[low, high]` as the model's input bounds.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], allow_negative_numbers = true)]
    pub input_bounds: Option<Vec<f64>>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Sensitivity,
    Taylor,
    Lrp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleArg {
    Deeptaylor,
    Alpha1beta0,
    Alpha2beta1,
    Epsilon,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainArg {
    /// Use the model's input bounds if present, otherwise non-negative.
    Auto,
    Nonnegative,
    Bounded,
    Real,
}

#[derive(Args, Debug, Clone)]
pub struct MethodArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Lrp)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = RuleArg::Deeptaylor)]
    pub rule: RuleArg,
    /// Input domain selecting the first-layer deep Taylor rule.
    #[arg(long, value_enum, default_value_t = DomainArg::Auto)]
    pub domain: DomainArg,
    /// Lower pixel bound for `--domain bounded`.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub low: f64,
    /// Upper pixel bound for `--domain bounded`.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub high: f64,
    /// ε for `--rule epsilon`.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    /// Input: an IDX image file (see --index) or a CSV of values.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Sample index within an IDX file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Keep only relevance flowing through one unit, as `position:unit`
    /// (position counts layer boundaries from the input).
    #[arg(long, value_name = "LAYER:INDEX")]
    pub filter: Option<String>,
    /// Average over all shifts with |dy|, |dx| ≤ k.
    #[arg(long, value_name = "K", conflicts_with = "sliding_window")]
    pub translate: Option<usize>,
    /// Explain a larger image by sliding the model window with this stride.
    #[arg(long, value_name = "STRIDE")]
    pub sliding_window: Option<usize>,
    /// Also write the input masked by the normalized heatmap.
    #[arg(long)]
    pub pattern: bool,
    /// Percentile used to clip the heatmap for --pattern.
    #[arg(long, default_value_t = 99.0)]
    pub pattern_percentile: f64,
    /// Output prefix: writes PREFIX.csv and PREFIX.ppm.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerArg {
    None,
    L2,
    L2mean,
    Expert,
}

#[derive(Args, Debug)]
pub struct PrototypeArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long, value_enum, default_value_t = RegularizerArg::L2)]
    pub regularizer: RegularizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// CSV holding the data mean for `--regularizer l2mean`.
    #[arg(long)]
    pub mean: Option<PathBuf>,
    /// Localization strength η.
    #[arg(long, requires = "anchor")]
    pub eta: Option<f64>,
    /// CSV holding the localization anchor x0.
    #[arg(long)]
    pub anchor: Option<PathBuf>,
    /// Model file providing the RBM expert (defaults to --model).
    #[arg(long)]
    pub expert: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// CSV holding the start point (defaults to the mean for l2mean, zeros
    /// otherwise).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Standard deviation of seeded noise added to the start point.
    #[arg(long, default_value_t = 0.1)]
    pub jitter: f64,
    /// Clip the result to `[LOW, HIGH]`.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], allow_negative_numbers = true)]
    pub clip: Option<Vec<f64>>,
    /// Output prefix: writes PREFIX.csv, PREFIX.ppm and PREFIX.trajectory.csv.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, short)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Run pixel-flipping for the chosen method and a random baseline.
    #[arg(long)]
    pub pixel_flip: bool,
    /// Patch side for pixel-flipping; 1 removes single features.
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    /// Value written into removed features.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub fill: f64,
    /// Stop flipping after this many patches.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Estimate the explanation's continuity ratio.
    #[arg(long)]
    pub continuity: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Output prefix for curve CSVs.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColormapArg {
    Diverging,
    Red,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Heatmap CSV (rows of the image; channels stacked vertically).
    #[arg(long)]
    pub heatmap: PathBuf,
    /// Number of stacked channels in the CSV.
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, value_enum, default_value_t = ColormapArg::Diverging)]
    pub colormap: ColormapArg,
    #[arg(long, short)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests exit 0; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

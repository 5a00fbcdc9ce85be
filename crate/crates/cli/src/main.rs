mod boxes;
mod commands;
mod draw;
mod error;

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, ErrorClass};

/// Object-specific distance estimation toolkit.
#[derive(Debug, Parser)]
#[command(name = "objdist", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build distance-annotated labels from a KITTI-layout directory.
    BuildDataset(BuildDatasetArgs),
    /// Generate a synthetic KITTI-layout dataset.
    Synth(SynthArgs),
    /// Train a distance model.
    Train(TrainArgs),
    /// Evaluate the model or a baseline against annotated distances.
    Eval(EvalArgs),
    /// Predict distances for boxes in one image.
    Predict(PredictArgs),
    /// Draw ground-truth and predicted distances onto images.
    Visualize(VisualizeArgs),
    /// Distance histogram and category counts of an annotation file.
    Stats(StatsArgs),
    /// Measure single-image inference latency.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory containing image_2/, label_2/, calib/ and velodyne/.
    #[arg(long)]
    pub kitti_dir: PathBuf,
    /// Output annotation file.
    #[arg(long)]
    pub out: PathBuf,
    /// Construction report (JSON); defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub percentile_ratio: f64,
    #[arg(long, default_value_t = 1)]
    pub min_points: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the configured frame count.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub images_dir: PathBuf,
    /// Calibration files supplying the projection matrix for the keypoint
    /// loss; required in enhanced mode.
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    /// Training configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Training report (JSON); defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Estimator {
    Model,
    Ipm,
    Svr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Jsonl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub estimator: Estimator,
    /// Annotations to evaluate against.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Images, needed by the model estimator.
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Calibration files, needed by the IPM estimator.
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    /// Camera height above the road for IPM, meters.
    #[arg(long, default_value_t = 1.65)]
    pub cam_height: f64,
    /// Camera pitch for IPM, radians.
    #[arg(long, default_value_t = 0.0)]
    pub pitch: f64,
    /// Annotations to fit the SVR on.
    #[arg(long, conflicts_with = "svr_model")]
    pub svr_train: Option<PathBuf>,
    /// Previously fitted SVR.
    #[arg(long)]
    pub svr_model: Option<PathBuf>,
    /// Where to save a freshly fitted SVR.
    #[arg(long, requires = "svr_train")]
    pub save_svr: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub svr_c: f64,
    #[arg(long, default_value_t = 0.25)]
    pub svr_epsilon: f64,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
    #[arg(long, value_enum, default_value = "micro")]
    pub averaging: AveragingArg,
    #[arg(long, default_value_t = 10.0)]
    pub bin_width: f64,
    /// Categories left out of every report.
    #[arg(long, value_delimiter = ',', default_value = "DontCare")]
    pub exclude: Vec<String>,
    /// Categories reported individually.
    #[arg(long, value_delimiter = ',', default_value = "Car,Pedestrian,Cyclist")]
    pub categories: Vec<String>,
    /// Per-object predictions (JSON lines) for `visualize`.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// One box per line: `left top right bottom [category]`.
    #[arg(long)]
    pub boxes: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Predictions written by `eval --predictions-out`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub images_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatsFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub bin_width: f64,
    #[arg(long, default_value_t = 110.0)]
    pub max_distance: f64,
    #[arg(long, value_enum, default_value = "table")]
    pub format: StatsFormat,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images_dir: PathBuf,
    /// Boxes to run per image; three fixed boxes per image when omitted.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(&a, out),
        Command::Synth(a) => commands::synth(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Predict(a) => commands::predict(&a, out),
        Command::Visualize(a) => commands::visualize(&a, out),
        Command::Stats(a) => commands::stats(&a, out),
        Command::Bench(a) => commands::bench(&a, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ErrorClass::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = run(cli, &mut out);
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! The `ouro` command line: argument parsing, config resolution, dispatch
//! and run provenance.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

pub use settings::{EvalConfig, GenDataConfig, InferConfig, InferVideoConfig, Provenance, PROVENANCE_FORMAT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ouro", version, about = "Single-step inverse and forward rendering")]
pub struct Cli {
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config block for the command, or a provenance file to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (for `eval`, the report file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Train one direction.
    Train(TrainArgs),
    /// Train both directions jointly from pretrained checkpoints.
    TrainCycle(CycleArgs),
    /// Single-step inference on one image or intrinsics directory.
    Infer(InferArgs),
    /// Windowed video inference over a directory of frames.
    InferVideo(VideoArgs),
    /// Score predictions against a dataset split.
    Eval(EvalArgs),
    /// Render tables and plots from a report.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::TrainCycle(_) => "train-cycle",
            Command::Infer(_) => "infer",
            Command::InferVideo(_) => "infer-video",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// indoor-like, city-like or wild.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
    /// Also write PNG previews.
    #[arg(long)]
    pub previews: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub direction: Option<String>,
    /// Dataset root; replaces the configured sources with its `train` split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: TrainOverrides,
    /// Continue from a saved checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Resume even if the run configuration changed.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct CycleArgs {
    /// Pretrained RGB→X checkpoint.
    #[arg(long)]
    pub inv: PathBuf,
    /// Pretrained X→RGB checkpoint.
    #[arg(long)]
    pub fwd: PathBuf,
    /// Annotated dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Unannotated dataset root.
    #[arg(long)]
    pub wild: Option<PathBuf>,
    #[arg(long)]
    pub wild_ratio: Option<f64>,
    #[arg(long)]
    pub lambda_cyc: Option<f64>,
    #[command(flatten)]
    pub common: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// RGB image (PNG or OTNS) for rgb2x; intrinsics directory for x2rgb.
    #[arg(long)]
    pub input: PathBuf,
    /// Comma list of channels to produce (rgb2x).
    #[arg(long)]
    pub tokens: Option<String>,
    /// Caption (x2rgb); defaults to the one stored with the intrinsics.
    #[arg(long)]
    pub caption: Option<String>,
}

#[derive(Debug, Args)]
pub struct VideoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of numerically ordered PNG or OTNS frames.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long)]
    pub allow_unpaired: bool,
    /// Fit one si-RMSE scale per plane instead of one per image.
    #[arg(long)]
    pub per_channel_si: bool,
    /// Perceptual backend: none or mse.
    #[arg(long)]
    pub perceptual: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub report: PathBuf,
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(ouro_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<ouro_core::Error> for CliError {
    fn from(e: ouro_core::Error) -> Self {
        use ouro_core::Error as E;
        match e {
            E::Validation(_) | E::Config(_) | E::Shape(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().format_target(false).try_init();
    log::set_max_level(level);
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    init_logging(cli.quiet);
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(&cli, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

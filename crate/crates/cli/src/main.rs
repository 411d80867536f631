//! `freqsplat` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqsplat::Error;

/// Deformable Gaussian splatting with frequency-emphasis losses.
#[derive(Debug, Parser)]
#[command(name = "freqsplat", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Render a checkpoint at chosen timestamps.
    Render(RenderArgs),
    /// Compute PSNR/SSIM of a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene name: static_texture, translating_blob or pulsating_sheet.
    pub scene: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Number of frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, logs and merged config.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub static_iters: Option<u64>,
    #[arg(long)]
    pub deform_iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub lambda_shf: Option<f64>,
    #[arg(long)]
    pub lambda_thf: Option<f64>,
    #[arg(long)]
    pub max_gaussians: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Initial point cloud (PLY) instead of depth back-projection.
    #[arg(long)]
    pub init_ply: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Overwrite an existing checkpoint.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory supplying the camera.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated times in [0, 1]; defaults to every training timestamp.
    #[arg(long, value_delimiter = ',')]
    pub times: Vec<f64>,
    /// Frame whose camera is used for every time.
    #[arg(long, default_value_t = 0)]
    pub camera: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write log-amplitude spectra and high-frequency weight maps.
    #[arg(long)]
    pub spectra: bool,
    /// Write color-coded flow of consecutive rendered frames.
    #[arg(long)]
    pub flow: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Restrict to these modules (repeatable).
    #[arg(long = "module")]
    pub modules: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub gaussians: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 24)]
    pub samples: usize,
    /// Test hook: flip the sign of `module/group`'s analytic gradient.
    #[arg(long, hide = true)]
    pub inject_sign_error: Option<String>,
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config", m),
            Failure::Data(m) => ("data", m),
            Failure::Numeric(m) => ("numeric", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidParameter(_) => Failure::Config(msg),
            Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => Failure::Data(msg),
            Error::NonFinite { .. } | Error::Contract(_) => Failure::Numeric(msg),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}

//! `xscale`: learn, match and evaluate image-set subspaces across
//! resolutions.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use xscale::matching::MatchMethod;
use xscale::projection::{ImageGeometry, KernelKind};
use xscale::ErrorKind;

use crate::config::ImageKind;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(xscale::Error),
}

impl From<xscale::Error> for CliError {
    fn from(e: xscale::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "xscale",
    version,
    about = "Cross-resolution subspace matching experiments"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// TOML or JSON file with default values for the command's flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted synthetic dataset (images plus manifest.json).
    GenSynthetic(GenArgs),
    /// Learn one subspace model per (class, condition) of a dataset.
    Learn(LearnArgs),
    /// Match a low-resolution model against a high-resolution one.
    Match(MatchArgs),
    /// Similarity matrices and class separation for gallery vs probe models.
    Evaluate(EvaluateArgs),
    /// Scale and noise sweeps over a high-resolution dataset.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    /// Samples per (class, condition) set.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Image size as WxH.
    #[arg(long)]
    pub size: Option<ImageGeometry>,
    /// Intrinsic dimension of the planted variation model.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub conditions: Option<usize>,
    #[arg(long)]
    pub max_frequency: Option<usize>,
    #[arg(long)]
    pub condition_strength: Option<f64>,
    #[arg(long)]
    pub texture_strength: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub format: Option<ImageKind>,
    /// Output directory (default: $XSCALE_OUT_DIR or the working directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Downsample every image to WxH before learning.
    #[arg(long)]
    pub scale: Option<ImageGeometry>,
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    /// Gaussian noise added after downsampling, in greyscale levels.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Subspace dimension.
    #[arg(long, conflicts_with = "energy")]
    pub dim: Option<usize>,
    /// Choose the dimension capturing this fraction of the variance.
    #[arg(long)]
    pub energy: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Low-resolution model file.
    #[arg(long)]
    pub low: Option<PathBuf>,
    /// High-resolution reference model file.
    #[arg(long)]
    pub high: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<MatchMethod>,
    /// Defaults to the kernel recorded with the low-resolution model.
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    /// Write mode image pairs as PREFIX_mode<i>_{reference,reconstructed}.pgm.
    #[arg(long, value_name = "PREFIX")]
    pub export_modes: Option<PathBuf>,
    /// Add the model means to exported modes.
    #[arg(long)]
    pub add_mean: bool,
    /// Run the constrained method even when it cannot discriminate.
    #[arg(long)]
    pub allow_degenerate: bool,
    /// Print the result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of high-resolution gallery models.
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Directory of low-resolution probe models.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Defaults to the first condition label in sorted order.
    #[arg(long)]
    pub gallery_condition: Option<String>,
    /// Defaults to the second condition label in sorted order, or the only one.
    #[arg(long)]
    pub probe_condition: Option<String>,
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MatchMethod>>,
    #[arg(long)]
    pub allow_degenerate: bool,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// High-resolution dataset. Without it, synthetic data is generated for
    /// every seed.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Low-resolution geometries, comma separated WxH.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<ImageGeometry>>,
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<KernelKind>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<MatchMethod>>,
    #[arg(long, value_delimiter = ',')]
    pub noise_sigmas: Option<Vec<f64>>,
    /// Subspace dimension D.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub gallery_condition: Option<String>,
    #[arg(long)]
    pub probe_condition: Option<String>,
    #[arg(long)]
    pub allow_degenerate: bool,
    /// Synthetic data: number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Synthetic data: samples per (class, condition).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Synthetic data: high-resolution size.
    #[arg(long)]
    pub size: Option<ImageGeometry>,
    /// Synthetic data: intrinsic dimension.
    #[arg(long)]
    pub intrinsic_dim: Option<usize>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub struct Globals {
    pub config: Option<PathBuf>,
    pub print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let globals = Globals {
        config: cli.config,
        print_config: cli.print_config,
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&globals, a),
        Command::Learn(a) => commands::learn(&globals, a),
        Command::Match(a) => commands::match_models(&globals, a),
        Command::Evaluate(a) => commands::evaluate(&globals, a),
        Command::Sweep(a) => commands::sweep(&globals, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use physdiff_core::config::Preset;
use physdiff_core::sampler::PhiLevel;

#[derive(Debug, Parser)]
#[command(name = "physdiff", version, about = "Physics-guided diffusion for underwater image enhancement")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the networks on a paired dataset.
    Train(TrainArgs),
    /// Enhance degraded images with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score images and write a metric CSV.
    Evaluate(EvaluateArgs),
    /// Build a synthetic paired dataset from clean images.
    Degrade(DegradeArgs),
    /// Print parameter and FLOP counts per network.
    Complexity(ComplexityArgs),
    /// Time the sampler at several step counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Built-in configuration to use when no file is given.
    #[arg(long, value_enum, conflicts_with = "config")]
    pub preset: Option<PresetArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
    Tiny,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Tiny => Preset::Tiny,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhiLevelArg {
    Destination,
    Source,
}

impl From<PhiLevelArg> for PhiLevel {
    fn from(p: PhiLevelArg) -> Self {
        match p {
            PhiLevelArg::Destination => PhiLevel::Destination,
            PhiLevelArg::Source => PhiLevel::Source,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root holding `raw/` and `reference/`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Directory for the checkpoint, logs and split.
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Score a few held-out images every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub validate_every: u64,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    /// A PNG file or a directory of them.
    #[arg(long, value_name = "DIR|FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    /// Sampling steps S.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub phi_level: Option<PhiLevelArg>,
    /// Only enhance the test stems listed in this split file.
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    /// Sampler settings from a run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Enhanced images.
    #[arg(long, value_name = "DIR")]
    pub enhanced: Option<PathBuf>,
    /// Ground truth directory, or `none` for no-reference scoring only.
    #[arg(long, value_name = "DIR|none", default_value = "none")]
    pub reference: String,
    /// Degraded inputs, scored on the same stems as the enhanced set.
    #[arg(long, value_name = "DIR")]
    pub raw: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory of clean PNG images.
    #[arg(long, value_name = "DIR", required_unless_present = "procedural")]
    pub clean: Option<PathBuf>,
    /// Generate this many procedural clean scenes instead of reading `--clean`.
    #[arg(long, value_name = "N", conflicts_with = "clean")]
    pub procedural: Option<usize>,
    /// Resize clean images to this square size (procedural scenes default to 64).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Input resolution (defaults to the configured one).
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained checkpoint; without one, freshly initialised weights from the configuration are timed.
    #[arg(long, value_name = "CKPT")]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Degraded input image (a procedural scene when omitted).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Comma-separated step counts; a count equal to T runs the full reference sampler.
    #[arg(long, value_delimiter = ',', default_value = "25,100,1000")]
    pub steps_list: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the schedule length T of a configuration-built model.
    #[arg(long, conflicts_with = "ckpt")]
    pub total_steps: Option<usize>,
}

//! `trajdiff`: synthetic data, two-stage training, prediction, evaluation
//! and the latency grid.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "trajdiff", version, about = "Diffusion trajectory prediction with fast sampling and candidate selection")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML configuration; defaults to the run directory's config.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set diffusion.skip=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for scene-parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Directory for the config snapshot, checkpoints, reports and logs.
    #[arg(long, global = true, default_value = "runs/default")]
    pub run_dir: PathBuf,
    /// Suppress human-readable progress on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Scene file (JSONL) written by `synth-data` or another converter.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Root of raw UCY/ETH annotation files.
    #[arg(long, requires = "leave_out")]
    pub ethucy: Option<PathBuf>,
    /// Held-out location for the leave-one-out protocol (ETH, Hotel, Univ, Zara1, Zara2).
    #[arg(long)]
    pub leave_out: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SamplingArgs {
    #[arg(long, value_parser = ["ddpm", "ddim"])]
    pub method: Option<String>,
    /// Total diffusion steps H.
    #[arg(long)]
    pub steps: Option<usize>,
    /// DDIM skip γ.
    #[arg(long)]
    pub skip: Option<usize>,
    /// Candidates per agent (M).
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SelectionArgs {
    #[arg(long)]
    pub k: Option<usize>,
    /// NMS threshold ω in meters.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Coverage radius r in meters.
    #[arg(long = "radius-r")]
    pub radius: Option<f64>,
    /// FDE weight in the score targets.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Nms,
    Coverage,
    Random,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal scene set.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Stage 1: train the encoder and denoiser.
    TrainDenoiser {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from a stage-1 checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: train the scorer with the stage-1 weights frozen.
    TrainScorer {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Sample, score and select K trajectories per scene.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, value_enum, default_value = "nms")]
        select: SelectArg,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
    },
    /// Latency and accuracy over step counts and sample counts.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[arg(long, value_enum, default_value = "nms")]
        select: SelectArg,
        /// Comma-separated step counts; the full count runs DDPM.
        #[arg(long, value_delimiter = ',')]
        steps_grid: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        samples_grid: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        max_scenes: Option<usize>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

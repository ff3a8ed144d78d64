//! `latentsr`: operator surface for the two-stage latent-diffusion
//! super-resolution pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "latentsr",
    about = "Latent-diffusion image super-resolution: dataset synthesis, two-stage training, sampling, evaluation, and cost accounting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand; flags override config keys.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; desk-scale defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `section.key = value` pairs, e.g. `run.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override run.out_dir.
    #[arg(long)]
    out_dir: Option<String>,
    /// Override data.dataset_dir.
    #[arg(long)]
    dataset_dir: Option<String>,
    /// Collapse the stage experts to a single denoiser (ablation).
    #[arg(long)]
    disable_sampling_moe: bool,
    /// Collapse every FFN layer to a single expert (ablation).
    #[arg(long)]
    disable_space_moe: bool,
    /// Decoder variant: baseline|aff|ffl|unet_ffl|aff_ffl (ablation).
    #[arg(long)]
    decoder_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the procedural training/holdout dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the stage-expert denoiser on encoder latents.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
    },
    /// Generate LR-latent pairs with the merged stage-1 sampler.
    GenPairs {
        #[command(flatten)]
        common: Common,
        /// Reverse-chain steps per pair (default: infer.pair_gen_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2: train the conditioned decoder on generated pairs
    /// (generates the pairs first when they are missing).
    TrainStage2 {
        #[command(flatten)]
        common: Common,
    },
    /// Super-resolve one PPM image.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input low-resolution image (binary PPM).
        #[arg(long)]
        input: PathBuf,
        /// Output path for the super-resolved PPM.
        #[arg(long)]
        output: PathBuf,
        /// Sampling steps (default: infer.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Metrics between equally named PPMs of two directories.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        ref_dir: PathBuf,
    },
    /// Parameter and FLOPs accounting for the configured models.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Sampling steps for the total-FLOPs column.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::TrainStage1 { common } => commands::train_stage1(&common),
        Command::GenPairs { common, steps } => commands::gen_pairs(&common, steps),
        Command::TrainStage2 { common } => commands::train_stage2(&common),
        Command::Infer {
            common,
            input,
            output,
            steps,
        } => commands::infer(&common, &input, &output, steps),
        Command::Eval {
            common,
            pred_dir,
            ref_dir,
        } => commands::eval(&common, &pred_dir, &ref_dir),
        Command::Flops { common, steps } => commands::flops(&common, steps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

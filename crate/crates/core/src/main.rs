use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use amodal_core::cli::{run, Ablation, Command, RunSpec};

#[derive(Parser)]
#[command(name = "amodal", version, about = "Amodal mask toolkit: synthesis, filtering, training, inference, evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides AMODAL_SEED and the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    IouRefine,
    PromptType,
    Composition,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic occlusion corpus.
    Synth,
    /// Drop low-quality annotations from a manifest.
    Filter {
        #[arg(long)]
        input: PathBuf,
    },
    /// Corpus statistics (instance count, POI, average ROR).
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the mask decoder on one or more manifests.
    Train {
        /// Repeat to mix several datasets.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Start from this checkpoint's weights.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict amodal masks for front-end detections.
    Infer {
        /// Manifest listing the images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Class-agnostic AP/AR of a result file.
    Eval {
        /// Ground-truth manifest.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
    /// Run one of the toy ablation studies.
    Ablate {
        #[arg(value_enum)]
        which: Which,
    },
    /// Write PNG overlays of a manifest or a result file.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = cli.common;
    let command = match cli.command {
        Cmd::Synth => Command::Synth,
        Cmd::Filter { input } => Command::Filter { input },
        Cmd::Stats { input } => Command::Stats { input },
        Cmd::Train { inputs, init, resume } => Command::Train { inputs, init, resume },
        Cmd::Infer { input, checkpoint, detections } => Command::Infer { input, checkpoint, detections },
        Cmd::Eval { input, results } => Command::Eval { input, results },
        Cmd::Ablate { which } => Command::Ablate {
            which: match which {
                Which::IouRefine => Ablation::IouRefine,
                Which::PromptType => Ablation::PromptType,
                Which::Composition => Ablation::Composition,
            },
        },
        Cmd::Viz { input, results } => Command::Viz { input, results },
    };
    let spec = RunSpec { command, config: common.config, seed: common.seed, out: common.out, overrides: common.overrides };
    match run(&spec) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `cim`: command-line driver for tokenizer training, pre-training,
//! evaluation, visualization and ablation sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cim_core::CimError;

use crate::commands::Common;
use crate::config::ConfigError;

#[derive(Parser)]
#[command(name = "cim", version, about = "Corrupted image modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set train.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common { config: a.config, out: a.out, seed: a.seed, sets: a.sets, force: a.force }
    }
}

#[derive(Args, Clone)]
struct VisualizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Tokenizer checkpoint.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Generator checkpoint written by `pretrain`.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Folder of input images; defaults to procedural shapes.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Corrupted variants per input.
    #[arg(long)]
    variants: Option<usize>,
    /// Number of inputs.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the visual tokenizer.
    TokenizerTrain(CommonArgs),
    /// Jointly train generator and enhancer.
    Pretrain(CommonArgs),
    /// Linear probe on frozen enhancer features.
    Probe(CommonArgs),
    /// End-to-end fine-tuning with layer-wise learning-rate decay.
    Finetune(CommonArgs),
    /// Write original | masked | corrupted panels.
    Visualize(VisualizeArgs),
    /// Run a grid of pre-training configurations.
    Ablate(CommonArgs),
}

fn quote(p: &std::path::Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TokenizerTrain(a) => commands::tokenizer_train(&a.into()),
        Command::Pretrain(a) => commands::pretrain(&a.into()),
        Command::Probe(a) => commands::probe(&a.into()),
        Command::Finetune(a) => commands::finetune(&a.into()),
        Command::Ablate(a) => commands::ablate(&a.into()),
        Command::Visualize(v) => {
            let mut c: Common = v.common.into();
            if let Some(p) = v.tokenizer {
                c.sets.push(format!("tokenizer={}", quote(&p)));
            }
            if let Some(p) = v.generator {
                c.sets.push(format!("generator={}", quote(&p)));
            }
            if let Some(p) = v.images {
                c.sets.push(format!("images={}", quote(&p)));
            }
            if let Some(n) = v.variants {
                c.sets.push(format!("variants={n}"));
            }
            if let Some(n) = v.count {
                c.sets.push(format!("count={n}"));
            }
            commands::visualize(&c)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CimError>() {
        Some(CimError::Config(_)) => 2,
        Some(CimError::Divergence { .. }) => 3,
        Some(CimError::IncompatibleCheckpoint { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

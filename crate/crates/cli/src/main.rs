mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stfm::ErrorKind;

use crate::config::Config;

#[derive(Parser)]
#[command(name = "stfm", version, about = "Spatiotemporal masked-image-modelling runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tiled synthetic dataset with its split.
    SynthData(Common),
    /// Masked-reconstruction pretraining on a dataset directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train a task head on synthetic labelled tiles.
    Finetune(Common),
    /// Score a fine-tuned head.
    Evaluate(Common),
    /// Render input / masked / reconstruction triplets with the loss of one batch.
    Reconstruct(Common),
    /// Compare analytic and finite-difference gradients.
    GradCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; unset keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Checkpoint => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common, resume) = match &cli.command {
        Command::SynthData(c) => ("synth-data", c, false),
        Command::Pretrain { common, resume } => ("pretrain", common, *resume),
        Command::Finetune(c) => ("finetune", c, false),
        Command::Evaluate(c) => ("evaluate", c, false),
        Command::Reconstruct(c) => ("reconstruct", c, false),
        Command::GradCheck(c) => ("grad-check", c, false),
    };
    let result = Config::load(common.config.as_deref(), &common.set, common.seed).and_then(|cfg| {
        commands::write_run_manifest(&common.out, name, &cfg, &common.set)?;
        match &cli.command {
            Command::SynthData(_) => commands::synth_data(&cfg, &common.out),
            Command::Pretrain { .. } => commands::pretrain(&cfg, &common.out, resume),
            Command::Finetune(_) => commands::finetune(&cfg, &common.out),
            Command::Evaluate(_) => commands::evaluate(&cfg, &common.out),
            Command::Reconstruct(_) => commands::reconstruct(&cfg, &common.out),
            Command::GradCheck(_) => commands::grad_check(&cfg, &common.out),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

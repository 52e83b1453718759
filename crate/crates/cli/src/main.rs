//! `mimic`: toy data, teacher preparation, pretraining under each ablation
//! mode, linear probing and map export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mimic_mae::trainer::AblationMode;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "mimic", version, about = "Masked autoencoder pretraining with encoder-side feature mimicking")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Ablation mode: mr_mae, low_only, joint_at_decoder or mimic_only.
    #[arg(long, global = true)]
    mode: Option<AblationMode>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write zero into the metrics `seconds` column so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory (overrides `data_dir`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Write into a directory holding artifacts of another config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy shape dataset with foreground masks.
    GenData,
    /// Train the toy-supervised teacher on the training split.
    TrainTeacher,
    /// Precompute teacher features and saliency for every image.
    ExportFeatures {
        /// Use a frozen randomly initialised teacher instead of the trained one.
        #[arg(long)]
        random_teacher: bool,
    },
    /// Pretrain the student.
    Pretrain {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on the frozen encoder.
    Probe {
        /// Student checkpoint; a random-init encoder when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export attention or saliency maps as grayscale images.
    Visualize {
        /// Student checkpoint; teacher saliency from the features file when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of validation images.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Tabulate pretrain and probe summaries of run directories.
    Report { runs: Vec<PathBuf> },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output = o.clone();
    }
    if let Some(d) = &common.data {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let cfg = resolve(c)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, c.force),
        Command::TrainTeacher => commands::train_teacher(&cfg),
        Command::ExportFeatures { random_teacher } => commands::export(&cfg, random_teacher),
        Command::Pretrain { resume } => commands::pretrain(&cfg, resume.as_deref(), c.deterministic, c.force),
        Command::Probe { checkpoint } => commands::probe(&cfg, checkpoint.as_deref(), c.force),
        Command::Visualize { checkpoint, limit } => commands::visualize(&cfg, checkpoint.as_deref(), limit, c.force),
        Command::Report { runs } => commands::report(&runs, c.out.as_deref()),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

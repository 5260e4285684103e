mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use xmask::tensor::Precision;

use crate::config::RunConfig;

/// Attention-mask guided adversarial attacks and XAI safety monitors.
#[derive(Debug, Parser)]
#[command(name = "xmask", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record every value in 64-bit precision.
    #[arg(long, global = true)]
    f64: bool,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train the classifier on the training split.
    TrainClassifier,
    /// Train the X-UNet mask generator against the frozen classifier.
    TrainXunet,
    /// Attack the evaluation split and save the adversarial images.
    Attack,
    /// Explain the evaluation split.
    Explain,
    /// Score adversarial images with the explanation monitor.
    Monitor,
    /// Compare attack methods and write the CSV and text reports.
    Benchmark,
    /// Write normalized saliency maps as PGM images.
    ExportSaliency,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.f64 {
        cfg.float_mode = Precision::F64;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    if let Some(jobs) = cli.jobs {
        anyhow::ensure!(jobs > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::TrainClassifier => commands::train_classifier(&cfg),
        Command::TrainXunet => commands::train_xunet(&cfg),
        Command::Attack => commands::attack(&cfg),
        Command::Explain => commands::explain(&cfg),
        Command::Monitor => commands::monitor(&cfg),
        Command::Benchmark => commands::benchmark(&cfg),
        Command::ExportSaliency => commands::export_saliency(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

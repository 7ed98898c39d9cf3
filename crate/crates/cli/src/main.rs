//! `tpp`: simulate Hawkes data, train variational point-process models or
//! Hawkes baselines, and evaluate, predict with and analyze the results.
//!
//! Every command takes `--config <json>` (flags override its fields) and
//! writes into `--out <dir>` a resolved config and a `manifest.json` with
//! the SHA-256 of each artifact. Exit codes: 0 success, 1 usage or input
//! error, 2 numeric failure.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{AnalyzeArgs, AnalyzeConfig, EvalArgs, EvalConfig, GenerateArgs, GenerateConfig, RunConfig, TrainArgs};
use error::{CliError, Result};
use output::Output;

#[derive(Debug, Parser)]
#[command(name = "tpp", version, about = "Variational neural temporal point processes")]
struct Cli {
    /// JSON config for the subcommand; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $TPP_OUT/<command> or runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from a Hawkes spec.
    Generate(GenerateArgs),
    /// Train a variational model or fit a Hawkes baseline.
    Train(TrainArgs),
    /// Next-event metrics (and intensity errors given the true spec).
    Evaluate(EvalArgs),
    /// Per-position next-event predictions as JSONL.
    Predict(EvalArgs),
    /// Latent SVD, intensity traces or goodness of fit.
    Analyze(AnalyzeArgs),
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = cli.config.as_deref();
    let out = cli.out.as_deref();
    let (mut output, name) = match cli.command {
        Command::Generate(a) => {
            let c = GenerateConfig::resolve(cfg, a)?;
            let mut o = Output::create(out, "generate")?;
            commands::generate(c, &mut o)?;
            (o, "generate")
        }
        Command::Train(a) => {
            let c = RunConfig::resolve(cfg, a)?;
            let mut o = Output::create(out, "train")?;
            commands::train_cmd(c, &mut o)?;
            (o, "train")
        }
        Command::Evaluate(a) => {
            let c = EvalConfig::resolve(cfg, a)?;
            let mut o = Output::create(out, "evaluate")?;
            commands::evaluate(c, &mut o)?;
            (o, "evaluate")
        }
        Command::Predict(a) => {
            let c = EvalConfig::resolve(cfg, a)?;
            let mut o = Output::create(out, "predict")?;
            commands::predict(c, &mut o)?;
            (o, "predict")
        }
        Command::Analyze(a) => {
            let c = AnalyzeConfig::resolve(cfg, a)?;
            let mut o = Output::create(out, "analyze")?;
            commands::analyze(c, &mut o)?;
            (o, "analyze")
        }
    };
    output.record("resolved_config.json");
    let manifest = output.finish()?;
    log::info!("{name}: wrote {}", manifest.display());
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

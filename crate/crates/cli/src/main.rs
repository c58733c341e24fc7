//! `bqe`: synthesis, recolouring, patching, training, enhancement and evaluation.

mod commands;
mod evaluate;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bqe_core::training::TrainingConfig;
use bqe_core::Component;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "bqe",
    version,
    about = "Blind quality enhancement for compressed dynamic point cloud attributes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Training and model configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the data and model seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Attribute component the model operates on.
    #[arg(long, global = true, default_value = "y", value_parser = parse_component)]
    pub component: Component,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Where to write the run manifest instead of the command's default.
    #[arg(long, global = true)]
    pub run_manifest: Option<PathBuf>,
}

fn parse_component(s: &str) -> std::result::Result<Component, String> {
    s.parse().map_err(|e: bqe_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a synthetic sequence as clean PLYs, degraded PLYs per QP and a pair manifest.
    MakeToyData(commands::MakeToyData),
    /// Transfers attributes from a reference frame onto a target geometry.
    Recolor(commands::Recolor),
    /// Splits a frame into overlapping patches.
    Patch(commands::Patch),
    /// Stage 1: trains the quality estimator.
    TrainQe(commands::TrainQe),
    /// Stage 2: trains the enhancement network with a frozen quality estimator.
    Train(commands::Train),
    /// Enhances a decoded sequence with a trained checkpoint.
    Enhance(commands::Enhance),
    /// Compares two rate–PSNR CSVs: ΔPSNR table, BD-rate and plots.
    Evaluate(evaluate::Evaluate),
    /// Re-runs a recorded command and checks its outputs bit for bit.
    Replay(run::Replay),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeToyData(_) => "make-toy-data",
            Command::Recolor(_) => "recolor",
            Command::Patch(_) => "patch",
            Command::TrainQe(_) => "train-qe",
            Command::Train(_) => "train",
            Command::Enhance(_) => "enhance",
            Command::Evaluate(_) => "evaluate",
            Command::Replay(_) => "replay",
        }
    }
}

impl GlobalArgs {
    /// The configuration file (or defaults) with the command-line overrides applied.
    pub fn training_config(&self) -> Result<TrainingConfig> {
        let mut config = match &self.config {
            Some(path) => TrainingConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => TrainingConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.model.seed = seed;
        }
        config.model.component = self.component;
        config.validate()?;
        Ok(config)
    }

    pub fn threads(&self) -> usize {
        if self.deterministic {
            return 1;
        }
        std::env::var("BQE_NUM_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n: &usize| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn execute(args: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(std::iter::once("bqe".to_string()).chain(args.iter().cloned()))?;
    let threads = cli.global.threads();
    // The pool can only be configured once per process; replays reuse it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let mut recorder = run::Recorder::start(cli.command.name(), args, &cli.global, threads);
    match &cli.command {
        Command::MakeToyData(c) => c.run(&cli.global, &mut recorder)?,
        Command::Recolor(c) => c.run(&cli.global, &mut recorder)?,
        Command::Patch(c) => c.run(&cli.global, &mut recorder)?,
        Command::TrainQe(c) => c.run(&cli.global, &mut recorder)?,
        Command::Train(c) => c.run(&cli.global, &mut recorder)?,
        Command::Enhance(c) => c.run(&cli.global, &mut recorder)?,
        Command::Evaluate(c) => c.run(&cli.global, &mut recorder)?,
        Command::Replay(c) => return c.run(),
    }
    recorder.finish(cli.global.run_manifest.as_deref())
}

/// The error chain, skipping causes already quoted by the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(clap_err) => {
                let _ = clap_err.print();
                ExitCode::from(if clap_err.use_stderr() { 2 } else { 0 })
            }
            None => {
                eprintln!("error: {}", describe(&e));
                ExitCode::FAILURE
            }
        },
    }
}

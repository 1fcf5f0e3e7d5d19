mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use physio_recon::training::StrategyKind;
use physio_recon::Error;

use config::RunConfig;

const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 1;
const EXIT_HASH: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "physio-recon",
    version,
    about = "Reconstruct respiratory volume and heart rate from fMRI ROI time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration. Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted override, e.g. `train.lr_init=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for both synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Continue past failing scans during preprocessing.
    #[arg(long, global = true)]
    keep_going: bool,

    /// Emit raw respiration and beat files from `synth`.
    #[arg(long, global = true)]
    raw_mode: bool,

    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<StrategyKind>,

    /// Prepared source dataset for transfer strategies.
    #[arg(long, global = true)]
    source: Option<PathBuf>,

    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Filter, resample and cache every scan of a manifest.
    Preprocess,
    /// Write a synthetic dataset with known encodings.
    Synth,
    /// Run a training strategy with k-fold evaluation.
    Train,
    /// Re-score the checkpoints of a finished run.
    Evaluate,
    /// Dump per-scan measured and predicted series.
    Predict,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!(
            "unknown strategy '{s}' (expected pretrain_only, scratch, joint_scratch or finetune)"
        )
    })
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    /// Already printed per item; only the exit code is left to decide.
    Reported(Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) | CliError::Reported(e) => {
                if e.is_hash_mismatch() {
                    EXIT_HASH
                } else if e.is_numeric() {
                    EXIT_NUMERIC
                } else {
                    EXIT_DATA
                }
            }
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PHYSIO_RECON_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "PHYSIO_RECON_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("synth.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    if cli.raw_mode {
        overrides.push("synth.raw_mode=true".into());
    }
    if let Some(kind) = cli.strategy {
        overrides.push(format!("strategy.kind={}", kind.name()));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides).map_err(CliError::Usage)?;
    if let Some(src) = &cli.source {
        cfg.strategy.source_dataset = Some(src.clone());
    }
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Train)
        && cfg.strategy.kind.needs_source()
        && cfg.strategy.source_dataset.is_none()
    {
        return Err(CliError::Usage(format!(
            "strategy '{}' needs a source dataset (--source or strategy.source_dataset)",
            cfg.strategy.kind.name()
        )));
    }
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out <dir> is required".into()))?;
    match cli.command {
        Command::Preprocess => commands::preprocess(&cfg, out, cli.keep_going),
        Command::Synth => commands::synth(&cfg, out),
        Command::Train => commands::train(&cfg, out),
        Command::Evaluate => commands::evaluate(&cfg, out),
        Command::Predict => commands::predict(&cfg, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Run(err) => eprintln!("error: {err}"),
                CliError::Reported(err) => {
                    eprintln!("error: stopped after failures, first was: {err}")
                }
            }
            ExitCode::from(e.code())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hydropinn::config::{Experiment, RunConfig};
use hydropinn::experiments::run_experiment;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Synth,
    Train,
    Shock,
    Ablation,
    Ensemble,
    Calibrate,
    Gradcheck,
    Report,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::Synth => Experiment::Synth,
            Command::Train => Experiment::Train,
            Command::Shock => Experiment::Shock,
            Command::Ablation => Experiment::Ablation,
            Command::Ensemble => Experiment::Ensemble,
            Command::Calibrate => Experiment::Calibrate,
            Command::Gradcheck => Experiment::Gradcheck,
            Command::Report => Experiment::Report,
        }
    }
}

/// Uncertainty-aware physics-informed flood depth inference.
///
/// Exit status: 0 success, 1 usage or config error, 2 runtime failure
/// (including a failed gradient check).
#[derive(Debug, Parser)]
#[command(name = "hydropinn", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// `section.key = value` run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides run.seed, model.rng_seed and train.rng_seed. Scene seeds
    /// are left alone so the data stays fixed.
    #[arg(long)]
    seed: Option<u64>,
    /// Log errors only.
    #[arg(long)]
    quiet: bool,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("HYDROPINN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| format!("HYDROPINN_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }

    let mut cfg = match RunConfig::from_file(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    cfg.run.experiment = cli.command.into();
    if let Some(out) = cli.out {
        cfg.run.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.model.rng_seed = seed;
        cfg.train.rng_seed = seed;
    }

    match run_experiment(&cfg) {
        Ok((dir, true)) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Ok((dir, false)) => {
            println!("{}", dir.display());
            eprintln!("error: {} check failed", cfg.run.experiment);
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prosody_mpm::experiment::report::{load_report, write_report};
use prosody_mpm::experiment::{ExperimentConfig, Outcome, Pipeline, REPORT_DIR};
use prosody_mpm::{par, Result};

/// Masked prosody model experiments from one seeded config file.
#[derive(Parser, Debug)]
#[command(name = "mpm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the MPM seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run with a single worker.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Masking strategy for `train` (span length or `random`); all
    /// configured strategies when omitted.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Worker threads for data-parallel stages.
    #[arg(long, env = "MPM_WORKERS", global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract or generate the feature cache.
    Features,
    /// Generate the synthetic corpus into the feature cache.
    Synth,
    /// Train MPM checkpoints.
    Train,
    /// Run the probe grid over the configured representations.
    Probe,
    /// Train every strategy and probe them in one paired grid.
    Sweep,
    /// Render tables and plots from a probe report.
    Report {
        /// Report to render; defaults to the run's probe report.
        report: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = &cli.strategy {
        if !cfg.strategies.contains(s) {
            cfg.strategies.push(s.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    if let Command::Report { report: Some(path) } = &cli.command {
        let report = load_report(path)?;
        let dir = cli.out.clone().unwrap_or_else(|| path.parent().map(PathBuf::from).unwrap_or_default());
        for f in write_report(&report, &[], &dir)? {
            println!("{}", f.display());
        }
        return Ok(Outcome::Complete);
    }
    let pipeline = Pipeline::new(cfg)?;
    log::info!("run {} (config {})", pipeline.root().display(), pipeline.config_hash());
    match &cli.command {
        Command::Features => pipeline.features(),
        Command::Synth => pipeline.synth(),
        Command::Train => {
            let strategies = match &cli.strategy {
                Some(s) => vec![s.clone()],
                None => pipeline.config().strategies.clone(),
            };
            let mut outcome = Outcome::Complete;
            for s in strategies {
                outcome = outcome.merge(pipeline.train(&s)?);
            }
            Ok(outcome)
        }
        Command::Probe => {
            let (report, outcome) = pipeline.probe()?;
            print!("{}", report.summary_tsv());
            Ok(outcome)
        }
        Command::Sweep => {
            let (report, outcome) = pipeline.sweep()?;
            print!("{}", report.summary_tsv());
            Ok(outcome)
        }
        Command::Report { .. } => {
            let report = load_report(&pipeline.report_path())?;
            let logs = pipeline.train_logs()?;
            for f in write_report(&report, &logs, &pipeline.root().join(REPORT_DIR))? {
                println!("{}", f.display());
            }
            Ok(Outcome::Complete)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let workers = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = workers {
        if !par::set_workers(n) && par::is_parallel() {
            log::warn!("worker count already fixed; ignoring {n}");
        }
    }
    match run(&cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(problems)) => {
            for p in problems {
                eprintln!("partial: {p}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

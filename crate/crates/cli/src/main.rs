//! `memtax`: run one pipeline stage from a JSON config.
//!
//! Exit status is 0 on success, 2 for configuration errors (including
//! missing prerequisite artifacts) and 1 for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, ValueEnum};
use memtax::config::{ConfigError, LoadedConfig};
use memtax::pipeline::{PipelineError, Run, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Index,
    Featurize,
    Taxonomy,
    Stats,
    Train,
    Evaluate,
    Cohort,
    Synth,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Index => Stage::Index,
            Command::Featurize => Stage::Featurize,
            Command::Taxonomy => Stage::Taxonomy,
            Command::Stats => Stage::Stats,
            Command::Train => Stage::Train,
            Command::Evaluate => Stage::Evaluate,
            Command::Cohort => Stage::Cohort,
            Command::Synth => Stage::Synth,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "memtax", version, about = "Memorization-factor analysis pipeline")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory; overrides paths.output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut loaded = LoadedConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        loaded.set_seed(seed);
    }
    let run = Run::new(loaded, cli.out);
    let stage = Stage::from(cli.command);
    let written = run.execute(stage).with_context(|| format!("{stage} failed"))?;
    for p in written {
        log::debug!("wrote {}", p.display());
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || c.downcast_ref::<PipelineError>().is_some_and(PipelineError::is_config)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

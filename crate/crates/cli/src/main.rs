use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hindsight_attrib::commands;
use hindsight_attrib::config::{ModelId, RunConfig};
use hindsight_attrib::exit_code;
use hindsight_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hindsight-attrib", version, about = "Feature attribution of portfolio strategies against a hindsight reference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Models to act on; defaults to the config's list. Repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load prices, compute indicators, write the aligned panel and feature dump.
    Ingest(Common),
    /// Train agents and fit regressors on the train range.
    Train(Common),
    /// Backtest trained models, equal weight and the hindsight strategy.
    Backtest(Common),
    /// Feature weights, correlations with the reference, z tests and histograms.
    Explain(Common),
    /// Run all four stages.
    All(Common),
}

fn setup(c: &Common) -> Result<(RunConfig, Vec<ModelId>)> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    let models = if c.model.is_empty() {
        cfg.model_ids()?
    } else {
        c.model
            .iter()
            .map(|m| ModelId::parse(m).ok_or_else(|| Error::Config(format!("unknown model `{m}`"))))
            .collect::<Result<_>>()?
    };
    Ok((cfg, models))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => setup(&c).and_then(|(cfg, _)| commands::cmd_ingest(&cfg)),
        Command::Train(c) => setup(&c).and_then(|(cfg, m)| commands::cmd_train(&cfg, &m)),
        Command::Backtest(c) => setup(&c).and_then(|(cfg, m)| commands::cmd_backtest(&cfg, &m)),
        Command::Explain(c) => setup(&c).and_then(|(cfg, m)| commands::cmd_explain(&cfg, &m)),
        Command::All(c) => setup(&c).and_then(|(cfg, m)| commands::cmd_all(&cfg, &m)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(e.class()) as u8)
        }
    }
}

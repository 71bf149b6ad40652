mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use config::RunConfig;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    /// Generate train/val/test splits of the planted-signal dataset.
    GenData,
    /// Train a fusion model on a generated dataset.
    Train,
    /// Export attribution maps.
    Attribute,
    /// Drop curves when masking the top-K% features.
    Faithfulness,
    /// Interaction scores per importance bin.
    Bins,
    /// Metric drop when masking ranked or random cross-modal pairs.
    PairMask,
    /// Ranked pair interaction tables for a few samples.
    Interactions,
    /// Collate earlier runs into summary tables.
    Report,
    /// Print every config key with its default and exit.
    Keys,
}

impl Command {
    fn name(self) -> String {
        self.to_possible_value()
            .map_or_else(|| "run".to_string(), |v| v.get_name().to_string())
    }
}

/// Feature-level interaction-aware fusion: data, training, attribution and
/// interaction harnesses.
#[derive(Debug, Parser)]
#[command(name = "flimoe", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Command::Keys = cli.command {
        for (key, default, doc) in config::KEYS {
            println!("{key:<24} {default:<34} {doc}");
        }
        return Ok(());
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let workers: usize = cfg.get("workers")?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .context("starting the worker pool")?;
    let dir = commands::create_run_dir(&cfg, &cli.command.name())?;
    let result = match cli.command {
        Command::GenData => commands::gen_data(&cfg, &dir),
        Command::Train => commands::train_model(&cfg, &dir),
        Command::Attribute => commands::attribute_maps(&cfg, &dir),
        Command::Faithfulness => commands::faithfulness(&cfg, &dir),
        Command::Bins => commands::bins(&cfg, &dir),
        Command::PairMask => commands::pair_mask(&cfg, &dir),
        Command::Interactions => commands::interactions(&cfg, &dir),
        Command::Report => commands::report(&cfg, &dir),
        Command::Keys => unreachable!("handled above"),
    };
    result.with_context(|| {
        format!(
            "{} failed; partial outputs in {}",
            cli.command.name(),
            dir.display()
        )
    })?;
    println!("{}", dir.display());
    Ok(())
}

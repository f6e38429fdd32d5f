//! Experiment command line for vMF classifiers: synthetic long-tailed data,
//! training, overlap-based calibration, ablations and diagnostics.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use clap::Parser;

pub use config::{Command, ExperimentConfig, OutputFormat, Overrides};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "vmfcal", version, about)]
pub struct Cli {
    /// Subcommand; may instead be set by `command` in the config file.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// TOML configuration. Flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Builds the post-merge configuration for `cli`.
pub fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&cli.overrides);
    if cli.command.is_some() {
        cfg.command = cli.command;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    commands::execute(&resolve(cli)?)
}

//! Command-line front end: dataset ingestion, configuration, the `fit`,
//! `interval`, `bounds` and `simulate` commands, and JSON reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod dataset;
pub mod table;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

pub use config::{RunConfig, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "ccc-fiducial",
    version,
    about = "Fiducial confidence intervals for the longitudinal CCC"
)]
pub struct Cli {
    /// Flat TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Fit,
    Interval,
    Bounds,
    Simulate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the mixed model and report estimates with the plug-in CCC.
    Fit(Settings),
    /// Confidence intervals for every rater pair (and all raters when L > 2).
    Interval(Settings),
    /// Attainable CCC bounds at the fit or at a scenario's truth.
    Bounds(Settings),
    /// Coverage study of a catalog scenario.
    Simulate(Settings),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Fit(_) => CommandKind::Fit,
            Command::Interval(_) => CommandKind::Interval,
            Command::Bounds(_) => CommandKind::Bounds,
            Command::Simulate(_) => CommandKind::Simulate,
        }
    }

    fn settings(self) -> Settings {
        match self {
            Command::Fit(s) | Command::Interval(s) | Command::Bounds(s) | Command::Simulate(s) => s,
        }
    }
}

/// Failures with their exit code: 1 for usage, 2 for runtime errors.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] ccc_fiducial::Error),
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError::Usage(m.into())
    }

    pub fn parse(m: impl Into<String>) -> Self {
        CliError::Parse(m.into())
    }

    pub fn io(m: impl Into<String>) -> Self {
        CliError::Io(m.into())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Parse(_) => "parse_error",
            CliError::Io(_) => "io_error",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    /// Machine-readable form.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
            exit_code: i32,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        let w = Wrapper {
            error: Body {
                kind: self.kind(),
                message: self.to_string(),
                exit_code: self.exit_code(),
            },
        };
        serde_json::to_string_pretty(&w).expect("error JSON")
    }
}

/// What a successful command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub json: String,
    /// Human-readable text for the terminal, if any.
    pub text: Option<String>,
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> Result<Output, CliError> {
    let kind = cli.command.kind();
    let flags = cli.command.settings();
    let settings = match &cli.config {
        Some(p) => flags.over(Settings::from_file(p)?),
        None => flags,
    };
    let cfg = RunConfig::resolve(settings)?;
    let out = match kind {
        CommandKind::Fit => commands::fit(&cfg)?,
        CommandKind::Interval => commands::interval(&cfg)?,
        CommandKind::Bounds => commands::bounds(&cfg)?,
        CommandKind::Simulate => commands::simulate(&cfg)?,
    };
    if let Some(path) = &cli.out {
        std::fs::write(path, format!("{}\n", out.json))
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    }
    Ok(out)
}

//! Command-line driver for the reliability-audit pipeline.
//!
//! Eight stages run in order: sample, render, generate, score, repair,
//! metrics, spread, report (plus `panel`, which prints the correlation
//! panel computed by `spread`). Only `generate` talks to a live backend;
//! everything downstream is a pure function of recorded artifacts. Each
//! stage records the protocol config hash next to its outputs, reruns
//! under the same hash are no-ops, and artifacts from a different hash are
//! refused rather than mixed.

mod config;
mod stages;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use relaudit::extraction::{EVAL_CONSTRAINED, EVAL_FIRST_CHAR, EVAL_REGEX};
use relaudit::report::ReportFormat;

use crate::config::RunConfig;
use crate::stages::StageCtx;

// ─── errors ───

/// Pipeline failure classified by exit code: usage 1, data 2, backend 3.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Backend(_) => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(msg) | AppError::Data(msg) | AppError::Backend(msg) => {
                f.write_str(msg)
            }
        }
    }
}

impl std::error::Error for AppError {}

impl From<relaudit::datamodel::DataError> for AppError {
    fn from(e: relaudit::datamodel::DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<relaudit::prompts::PromptError> for AppError {
    fn from(e: relaudit::prompts::PromptError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<relaudit::calibration::CalibrationError> for AppError {
    fn from(e: relaudit::calibration::CalibrationError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<relaudit::robustness::RobustnessError> for AppError {
    fn from(e: relaudit::robustness::RobustnessError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<relaudit::bootstrap::BootstrapError> for AppError {
    fn from(e: relaudit::bootstrap::BootstrapError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<relaudit::report::ReportError> for AppError {
    fn from(e: relaudit::report::ReportError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<relaudit::client::ClientError> for AppError {
    fn from(e: relaudit::client::ClientError) -> Self {
        AppError::Backend(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

// ─── command line ───

#[derive(Parser)]
#[command(
    name = "relaudit",
    version,
    about = "Reliability-audit pipeline for small language models"
)]
struct Cli {
    /// Run-config TOML; every stage runs under one.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory holding the pipeline artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    run_dir: PathBuf,
    /// Override the protocol seed from the config (changes the config hash).
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvaluatorArg {
    #[value(name = "first_char")]
    FirstChar,
    #[value(name = "regex")]
    Regex,
    #[value(name = "constrained")]
    Constrained,
}

impl EvaluatorArg {
    fn as_str(self) -> &'static str {
        match self {
            EvaluatorArg::FirstChar => EVAL_FIRST_CHAR,
            EvaluatorArg::Regex => EVAL_REGEX,
            EvaluatorArg::Constrained => EVAL_CONSTRAINED,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(arg: FormatArg) -> Self {
        match arg {
            FormatArg::Markdown => ReportFormat::MarkdownTables,
            FormatArg::Csv => ReportFormat::CsvBundle,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw the deterministic evaluation sample for each dataset.
    Sample,
    /// Render prompts for each dataset and prompt variant.
    Render,
    /// Query the completion backend for each cell (the only live stage).
    Generate {
        /// Override the backend base URL from the config.
        #[arg(long, value_name = "URL")]
        base_url: Option<String>,
    },
    /// Apply evaluator pipelines to the transcripts.
    Score {
        /// Evaluator pipeline to apply; repeat the flag for several.
        /// Defaults to first_char and regex.
        #[arg(long, value_enum, value_name = "NAME")]
        evaluator: Vec<EvaluatorArg>,
        /// Backend base URL override for the constrained evaluator.
        #[arg(long, value_name = "URL")]
        base_url: Option<String>,
    },
    /// Append constrained re-ask verdicts from recorded answers or a backend.
    Repair {
        /// Override the backend base URL from the config.
        #[arg(long, value_name = "URL")]
        base_url: Option<String>,
    },
    /// Compute per-cell calibration metrics.
    Metrics,
    /// Compute accuracy spread across prompt variants.
    Spread,
    /// Print the model-size versus spread correlation panel.
    Panel,
    /// Assemble the audit report and emit it in the chosen format.
    Report {
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        /// Output directory; defaults to <run-dir>/report.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let config_path = cli.config.as_deref().ok_or_else(|| {
        AppError::Usage("pass --config <FILE>; every stage runs under a run-config".into())
    })?;
    let config = RunConfig::load(config_path, cli.seed)?;
    let ctx = StageCtx::new(&config, &cli.run_dir)?;
    match cli.command {
        Command::Sample => stages::sample(&ctx),
        Command::Render => stages::render(&ctx),
        Command::Generate { base_url } => stages::generate(&ctx, base_url.as_deref()),
        Command::Score {
            evaluator,
            base_url,
        } => {
            let names: Vec<&'static str> = if evaluator.is_empty() {
                vec![EVAL_FIRST_CHAR, EVAL_REGEX]
            } else {
                let mut names = Vec::new();
                for arg in evaluator {
                    if !names.contains(&arg.as_str()) {
                        names.push(arg.as_str());
                    }
                }
                names
            };
            stages::score(&ctx, &names, base_url.as_deref())
        }
        Command::Repair { base_url } => stages::repair(&ctx, base_url.as_deref()),
        Command::Metrics => stages::metrics(&ctx),
        Command::Spread => stages::spread(&ctx),
        Command::Panel => stages::panel(&ctx),
        Command::Report { format, out } => stages::report(&ctx, format.into(), out),
    }
}

// ─── tests ───

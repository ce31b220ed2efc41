//! `covgam` command-line pipeline: synthesise, fit, select, forecast, score.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use covgam::select::Restriction;
use serde_json::json;

use crate::artifact::Workspace;
use crate::commands::Context;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "covgam", version, about = "Multivariate Gaussian additive models with MCD covariance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory, read by later stages.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Candidate restriction: full, cal, cal+ren or diag.
    #[arg(long, global = true)]
    restriction: Option<String>,
    /// JSON aggregation matrix applied before scoring.
    #[arg(long, global = true)]
    transform: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Synth,
    /// Fit the univariate mean models.
    FitMean,
    /// Rank effects by boosting and choose the covariance model.
    Select,
    /// Fit the selected covariance model and the copula baseline.
    Fit,
    /// Refit on rolling windows and forecast each test block.
    Forecast,
    /// Score forecasts, optionally after a linear transform.
    Score,
    /// Block-bootstrap score differences between models.
    Bootstrap,
    /// Accumulated local effect tables.
    Ale,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::FitMean => "fit-mean",
            Command::Select => "select",
            Command::Fit => "fit",
            Command::Forecast => "forecast",
            Command::Score => "score",
            Command::Bootstrap => "bootstrap",
            Command::Ale => "ale",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let (mut cfg, base) = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = &cli.restriction {
        cfg.boost.restriction = Restriction::parse(r)?;
    }
    cfg.validate()?;
    let mut ws = Workspace::new(&cli.out, cfg.hash(), cfg.seed)?;
    let ctx = Context {
        cfg,
        base,
        transform: cli.transform.clone(),
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx, &mut ws)?,
        Command::FitMean => commands::fit_mean(&ctx, &mut ws)?,
        Command::Select => commands::select(&ctx, &mut ws)?,
        Command::Fit => commands::fit(&ctx, &mut ws)?,
        Command::Forecast => commands::forecast(&ctx, &mut ws)?,
        Command::Score => commands::score(&ctx, &mut ws)?,
        Command::Bootstrap => commands::bootstrap(&ctx, &mut ws)?,
        Command::Ale => commands::ale(&ctx, &mut ws)?,
    }
    ws.finish(cli.command.name())
}

fn exit_code(err: &anyhow::Error) -> (u8, String) {
    match err.chain().find_map(|e| e.downcast_ref::<covgam::Error>()) {
        Some(e) => {
            let kind = format!("{e:?}");
            let kind = kind
                .split(|c: char| !c.is_alphanumeric())
                .next()
                .unwrap_or("Error")
                .to_string();
            (if e.is_numeric() { 3 } else { 2 }, kind)
        }
        None => (2, "Validation".to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let record = json!({
                "status": "error",
                "command": cli.command.name(),
                "exit_code": code,
                "kind": kind,
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}

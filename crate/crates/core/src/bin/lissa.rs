use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lissa_core::config::{Command, ExperimentConfig};
use lissa_core::error::Error;
use lissa_core::experiments::run_experiment;

/// Curvature statistics, LiSSA hyperparameters and influence checks.
#[derive(Parser, Debug)]
#[command(name = "lissa", version)]
struct Cli {
    /// Subcommand; overrides `command` in the config file.
    #[arg(value_parser = parse_command)]
    command: Option<Command>,

    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory (default: `out_dir` from the config, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads for parallel probes; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_command(s: &str) -> Result<Command, String> {
    s.parse().map_err(|e: Error| {
        let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
        format!("{e}; expected one of {}", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?.0,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = cli.command {
        cfg.command = Some(c);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let out = cli
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let summary = run_experiment(&cfg, &out)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    for line in &summary.lines {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

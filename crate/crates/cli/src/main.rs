//! `ne`: run, validate and summarize dynamic-topology TD3 experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::info;

use neuroplastic::agent::train_at_precision;
use neuroplastic::config::{Mode, RunConfig, DEFAULT_OUT_DIR, OUT_ENV_VAR};
use neuroplastic::metrics::{aggregate_report, final_summary, METRICS_FILE};

#[derive(Parser, Debug)]
#[command(name = "ne", version, about = "Neuroplastic expansion experiments on TD3")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every (mode, seed) pair of a config and write one directory per run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run.seeds` with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `run.modes` with a single mode (ne, random, static, reset).
        #[arg(long)]
        mode: Option<Mode>,
        /// Output root; falls back to `run.out_dir`, then `$NE_OUT`, then `runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs: final-window mean and std per mode.
    Report {
        /// Pattern matching run directories, e.g. `runs/**/seed_*`.
        #[arg(long)]
        glob: String,
        /// Where `report.csv` and `report.txt` go; defaults to the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config, printing the resolved document.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Maps to the process exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Config(e.into()))
}

/// Directory of one run below `root`.
fn run_dir(root: &Path, cfg: &RunConfig, several_labels: bool) -> PathBuf {
    let seed = format!("seed_{}", cfg.seed());
    if several_labels {
        root.join(cfg.label()).join(seed)
    } else {
        root.join(seed)
    }
}

fn run(config: &Path, seed: Option<u64>, mode: Option<Mode>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load(config)?.with_out_dir(out);
    if let Some(s) = seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(m) = mode {
        cfg.run.modes = vec![m];
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    let root = cfg.run.out_dir.clone().expect("resolved by with_out_dir");
    let several = cfg.run.modes.len() > 1;
    for &m in &cfg.run.modes {
        for &s in &cfg.run.seeds {
            let single = cfg.single(m, s);
            let dir = run_dir(&root, &single, several);
            info!("training {} seed {} -> {}", single.label(), s, dir.display());
            let summary = train_at_precision(&single, Some(&dir))
                .with_context(|| format!("run {} seed {s}", single.label()))
                .map_err(Failure::Runtime)?;
            let (ret, ratio) = final_summary(&summary.rows);
            println!(
                "{} seed {}: final return {:.3}, critic activated ratio {:.4}, {} topology events -> {}",
                single.label(),
                s,
                ret,
                ratio,
                summary.events.len(),
                dir.display()
            );
        }
    }
    Ok(())
}

fn report(pattern: &str, out: Option<PathBuf>) -> Result<(), Failure> {
    let paths = glob::glob(pattern).map_err(|e| Failure::Config(anyhow!("bad --glob pattern `{pattern}`: {e}")))?;
    let mut dirs = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Failure::Runtime(e.into()))?;
        if p.is_dir() && p.join(METRICS_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::Runtime(anyhow!("no run directories match `{pattern}`")));
    }
    let report = aggregate_report(&dirs).map_err(|e| Failure::Runtime(e.into()))?;
    let out = out
        .or_else(|| std::env::var_os(OUT_ENV_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    report.write(&out).map_err(|e| Failure::Runtime(e.into()))?;
    print!("{}", report.to_text());
    info!("{} runs summarized into {}", dirs.len(), out.display());
    Ok(())
}

fn validate(config: &Path) -> Result<(), Failure> {
    let cfg = load(config)?;
    print!("{}", cfg.to_toml());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, mode, out } => run(&config, seed, mode, out),
        Command::Report { glob, out } => report(&glob, out),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

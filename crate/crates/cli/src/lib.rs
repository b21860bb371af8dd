//! `hill` command line tool: configuration, subcommands and run manifests.

pub mod commands;
pub mod config;
pub mod manifest;

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::commands::Context;
use crate::config::{RunConfig, Settings};
use crate::manifest::{write_json, Artifacts, Manifest};

#[derive(Debug, Parser)]
#[command(name = "hill", version, about = "Train two-tower models and build, search and evaluate hierarchical indexes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set eval.beam=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Trains the two-tower model and writes its checkpoint.
    Train,
    /// Builds the hierarchical index from a trained model.
    BuildIndex,
    /// Beam-searches the index for the given users, one JSON line each.
    Retrieve {
        /// Comma separated user ids; defaults to `retrieve.users`, then all users.
        #[arg(long, value_delimiter = ',')]
        users: Vec<u32>,
    },
    /// Flat and beam Recall/NDCG plus the cost estimate.
    Eval,
    /// Test-time training on index-node pairs.
    Ttt,
    /// Pair counts over a grid of depths and thresholds.
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::BuildIndex => "build-index",
            Command::Retrieve { .. } => "retrieve",
            Command::Eval => "eval",
            Command::Ttt => "ttt",
            Command::Sweep => "sweep",
        }
    }

    fn file_stem(&self) -> &'static str {
        match self {
            Command::BuildIndex => "index",
            other => other.name(),
        }
    }
}

/// Configuration problems, reported together.
#[derive(Debug)]
pub struct InvalidConfig(pub Vec<String>);

impl std::fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for p in &self.0 {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for InvalidConfig {}

/// Defaults, then `--config`, then `--set`, then the dedicated flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, InvalidConfig> {
    let mut settings = Settings::defaults();
    let mut problems = Vec::new();
    if let Some(path) = &cli.config {
        settings.apply_file(path, &mut problems);
    }
    for o in &cli.overrides {
        settings.apply_override(o, &mut problems);
    }
    if let Some(seed) = cli.seed {
        settings.set("seed", toml::Value::Integer(seed as i64), "--seed", &mut problems);
    }
    if let Some(threads) = cli.threads {
        settings.set("threads", toml::Value::Integer(threads as i64), "--threads", &mut problems);
    }
    if let Some(out) = &cli.out {
        settings.set("out", toml::Value::String(out.display().to_string()), "--out", &mut problems);
    }
    let cfg = RunConfig::from_settings(&settings);
    match cfg {
        Ok(cfg) if problems.is_empty() => {
            let missing = command_problems(&cli.command, &cfg);
            if missing.is_empty() {
                Ok(cfg)
            } else {
                Err(InvalidConfig(missing))
            }
        }
        Ok(_) => Err(InvalidConfig(problems)),
        Err(more) => {
            problems.extend(more);
            Err(InvalidConfig(problems))
        }
    }
}

fn command_problems(command: &Command, cfg: &RunConfig) -> Vec<String> {
    let p = &cfg.paths;
    let needed: Vec<(&str, &PathBuf)> = match command {
        Command::Train => vec![],
        Command::BuildIndex => vec![("paths.model", &p.model)],
        _ => vec![("paths.index", &p.index), ("paths.index_model", &p.index_model)],
    };
    let mut problems: Vec<String> = needed
        .into_iter()
        .filter(|(_, path)| !path.exists())
        .map(|(key, path)| format!("`{key}`: {} does not exist (run the earlier pipeline step first)", path.display()))
        .collect();
    match command {
        Command::Ttt => problems.extend(cfg.ttt_problems(&[cfg.ttt.depth])),
        Command::Sweep => problems.extend(cfg.ttt_problems(&cfg.sweep.depths)),
        _ => {}
    }
    problems
}

/// Runs one command: writes `<command>_report.json` and `manifest-<command>.json`
/// under the output directory and the report itself to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<Value> {
    let cfg = resolve(cli)?;
    std::fs::create_dir_all(&cfg.paths.out).with_context(|| format!("creating {}", cfg.paths.out.display()))?;
    let threads =
        if cfg.threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { cfg.threads };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let started = Instant::now();
    let mut ctx = Context { cfg: &cfg, artifacts: Artifacts::default() };
    let mut lines = Vec::new();
    let report = pool.install(|| match &cli.command {
        Command::Train => commands::train_cmd(&mut ctx),
        Command::BuildIndex => commands::build_index_cmd(&mut ctx),
        Command::Retrieve { users } => {
            let users = if users.is_empty() { cfg.retrieve_users.clone() } else { users.clone() };
            commands::retrieve_cmd(&mut ctx, &users, &mut lines)
        }
        Command::Eval => commands::eval_cmd(&mut ctx),
        Command::Ttt => commands::ttt_cmd(&mut ctx),
        Command::Sweep => commands::sweep_cmd(&mut ctx),
    })?;
    let stem = cli.command.file_stem();
    let report_path = cfg.paths.out.join(format!("{stem}_report.json"));
    write_json(&report_path, &report)?;
    ctx.artifacts.add(&report_path);
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.seed,
        threads,
        artifacts: ctx.artifacts.checksums()?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        metrics: report.clone(),
    };
    write_json(&cfg.paths.out.join(format!("manifest-{}.json", cli.command.name())), &manifest)?;
    stdout.write_all(&lines)?;
    if !matches!(cli.command, Command::Retrieve { .. }) {
        writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

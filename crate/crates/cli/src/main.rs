//! `cold`: generate data, train, evaluate, select feature groups, benchmark
//! and serve pre-ranking models.

mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cold_core::features::BatchPath;
use cold_core::numerics::PrecisionMode;

use crate::config::{env_overrides, resolve, ModelKind};

#[derive(Parser, Debug)]
#[command(name = "cold", version, about = "Cost-aware pre-ranking toolkit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    sets: Vec<(String, String)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports and plots.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Also write SVG charts.
    #[arg(long, global = true)]
    plots: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Cold,
    TwoTower,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Gen {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Train a model and write a checkpoint plus a JSON-lines metric log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<Kind>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint's weights and optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Compare checkpoints by AUC, GAUC and top-k recall.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Repeatable.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Use this model instead of the ground truth as the ranking oracle.
        #[arg(long)]
        oracle_checkpoint: Option<PathBuf>,
    },
    /// Rank feature groups and pick the best K under a serving constraint.
    Select {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long)]
        min_qps: Option<f64>,
        #[arg(long)]
        max_p99_ms: Option<f64>,
    },
    /// Measure usable QPS and latency over the path x precision grid.
    Bench {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        path: Vec<BatchPath>,
        #[arg(long, value_delimiter = ',')]
        precision: Vec<PrecisionMode>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Serve a checkpoint over HTTP, optionally training online from a stream.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Select { .. } => "select",
            Command::Bench { .. } => "bench",
            Command::Serve { .. } => "serve",
        }
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: serde::Serialize>(v: T) -> Result<toml::Value> {
    toml::Value::try_from(v).map_err(|e| anyhow!("flag value: {e}"))
}

/// Dedicated flags as config overrides.
fn flag_overrides(cli: &Cli) -> Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut put = |key: &str, v: toml::Value| out.push((key.to_string(), v));
    if let Some(s) = cli.seed {
        put("seed", value(s)?);
    }
    if let Some(d) = &cli.out_dir {
        put("out_dir", value(d)?);
    }
    if cli.plots {
        put("plots", value(true)?);
    }
    match &cli.command {
        Command::Gen { data, examples } => {
            if let Some(d) = data {
                put("data.path", value(d)?);
            }
            if let Some(n) = examples {
                put("data.generator.n_examples", value(n)?);
            }
        }
        Command::Train {
            data,
            checkpoint,
            model,
            epochs,
            ..
        } => {
            if let Some(d) = data {
                put("data.path", value(d)?);
            }
            if let Some(c) = checkpoint {
                put("model.checkpoint", value(c)?);
            }
            if let Some(m) = model {
                let kind = match m {
                    Kind::Cold => ModelKind::Cold,
                    Kind::TwoTower => ModelKind::TwoTower,
                };
                put("model.kind", value(kind)?);
            }
            if let Some(e) = epochs {
                put("train.epochs", value(e)?);
            }
        }
        Command::Eval {
            data,
            checkpoint,
            oracle_checkpoint,
        } => {
            if let Some(d) = data {
                put("data.path", value(d)?);
            }
            if !checkpoint.is_empty() {
                put("eval.checkpoints", value(checkpoint)?);
            }
            if let Some(o) = oracle_checkpoint {
                put("eval.oracle_checkpoint", value(o)?);
            }
        }
        Command::Select {
            data,
            checkpoint,
            ks,
            min_qps,
            max_p99_ms,
        } => {
            if let Some(d) = data {
                put("data.path", value(d)?);
            }
            if let Some(c) = checkpoint {
                put("model.checkpoint", value(c)?);
            }
            if !ks.is_empty() {
                put("select.ks", value(ks)?);
            }
            if let Some(q) = min_qps {
                put("select.constraint.min_qps", value(q)?);
            }
            if let Some(p) = max_p99_ms {
                put("select.constraint.max_p99_ms", value(p)?);
            }
        }
        Command::Bench {
            data,
            checkpoint,
            path,
            precision,
            chunk_size,
            workers,
            threads,
        } => {
            if let Some(d) = data {
                put("data.path", value(d)?);
            }
            if let Some(c) = checkpoint {
                put("model.checkpoint", value(c)?);
            }
            if !path.is_empty() {
                put("engine.paths", value(path)?);
            }
            if !precision.is_empty() {
                put("engine.precisions", value(precision)?);
            }
            if let Some(c) = chunk_size {
                put("engine.plan.chunk_size", value(c)?);
            }
            if let Some(w) = workers {
                put("engine.workers", value(w)?);
            }
            if let Some(t) = threads {
                put("engine.threads", value(t)?);
            }
        }
        Command::Serve {
            checkpoint,
            addr,
            stream,
            duration_s,
            threads,
        } => {
            if let Some(c) = checkpoint {
                put("model.checkpoint", value(c)?);
            }
            if let Some(a) = addr {
                put("serve.addr", value(a)?);
            }
            if let Some(s) = stream {
                put("serve.stream", value(s)?);
            }
            if let Some(d) = duration_s {
                put("serve.duration_s", value(d)?);
            }
            if let Some(t) = threads {
                put("serve.threads", value(t)?);
            }
        }
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<()> {
    let env = env_overrides(std::env::vars());
    let config = resolve(cli.config.as_deref(), &env, &cli.sets, &flag_overrides(cli)?)?;
    if cli.print_config {
        print!("{}", toml::to_string(&config)?);
        return Ok(());
    }
    if config.engine.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.engine.threads)
            .build_global()
            .map_err(|e| anyhow!("rayon pool: {e}"))?;
    }
    let outcome = match &cli.command {
        Command::Gen { .. } => commands::gen(&config)?,
        Command::Train { resume, .. } => commands::train(&config, *resume)?,
        Command::Eval { .. } => commands::eval(&config)?,
        Command::Select { .. } => commands::select_cmd(&config)?,
        Command::Bench { .. } => commands::bench(&config)?,
        Command::Serve { .. } => commands::serve(&config)?,
    };
    let path = outcome.report.write(&config.out_dir)?;
    println!("{}", outcome.report.table.trim_end());
    println!("report: {}", path.display());
    for p in &outcome.plots {
        println!("plot: {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "command": cli.command.name(),
                "error": format!("{e:#}"),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

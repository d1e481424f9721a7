//! `stein`: runs one experiment from a JSON config and writes `metrics.csv`,
//! `summary.json` and any command-specific CSV files into `--out`.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 bad configuration or
//! arguments, 3 numerical failure.

mod config;
mod output;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use config::{ConfigError, ExperimentConfig};
use output::{write_json, write_metrics, write_records, write_table};
use run::{FileBody, Output, RunError};

#[derive(Parser, Debug)]
#[command(name = "stein", version, about = "Stein variational experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; defaults apply to everything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for trial- and matrix-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq)]
enum Command {
    /// Plain SVGD with the target's score.
    Svgd,
    /// Gradient-free SVGD through a surrogate.
    Gfsvgd,
    /// Annealed gradient-free SVGD with a kernel-curve surrogate.
    AgfSvgd,
    /// Stein importance sampling for the normalizing constant.
    Steinis,
    /// Log normalizing constant by KSD path integration.
    PathLogz,
    /// Discrete sampling through a continuous relaxation.
    DiscreteSample,
    /// Kernelized goodness-of-fit test for a discrete model.
    Gof,
    /// Black-box importance weights.
    Bbis,
    /// KL-averaging rate simulation.
    Aggregate,
    /// Exact reference computations.
    Oracle,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Svgd => "svgd",
            Command::Gfsvgd => "gfsvgd",
            Command::AgfSvgd => "agf-svgd",
            Command::Steinis => "steinis",
            Command::PathLogz => "path-logz",
            Command::DiscreteSample => "discrete-sample",
            Command::Gof => "gof",
            Command::Bbis => "bbis",
            Command::Aggregate => "aggregate",
            Command::Oracle => "oracle",
        }
    }
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig, RunError> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let raw = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    config::parse(&raw).map_err(|e: ConfigError| RunError::Config(e.to_string()))
}

/// Runs the command and returns the resolved section (defaults filled in)
/// together with its output.
fn dispatch(cmd: Command, cfg: &ExperimentConfig, seed: u64) -> Result<(Value, Output), RunError> {
    fn go<T: serde::Serialize + Default + Clone>(
        section: &Option<T>,
        seed: u64,
        f: impl FnOnce(&T, u64) -> Result<Output, RunError>,
    ) -> Result<(Value, Output), RunError> {
        let s = section.clone().unwrap_or_default();
        let echo = serde_json::to_value(&s).expect("config sections serialize");
        Ok((echo, f(&s, seed)?))
    }
    match cmd {
        Command::Svgd => go(&cfg.svgd, seed, run::svgd),
        Command::Gfsvgd => go(&cfg.gfsvgd, seed, run::gfsvgd),
        Command::AgfSvgd => go(&cfg.agf_svgd, seed, run::agf_svgd),
        Command::Steinis => go(&cfg.steinis, seed, run::steinis),
        Command::PathLogz => go(&cfg.path_logz, seed, run::path_logz),
        Command::DiscreteSample => go(&cfg.discrete_sample, seed, run::discrete_sample),
        Command::Gof => go(&cfg.gof, seed, run::gof),
        Command::Bbis => go(&cfg.bbis, seed, run::bbis),
        Command::Aggregate => go(&cfg.aggregate, seed, run::aggregate),
        Command::Oracle => go(&cfg.oracle, seed, run::oracle),
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

fn write_outputs(dir: &Path, summary: &Value, out: &Output) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let p = dir.join("metrics.csv");
    write_metrics(&p, &out.metrics).map_err(|e| io(&p, e))?;
    for (name, body) in &out.files {
        let p = dir.join(name);
        match body {
            FileBody::Table(t) => write_table(&p, t),
            FileBody::Records { header, rows } => write_records(&p, header, rows),
        }
        .map_err(|e| io(&p, e))?;
    }
    let p = dir.join("summary.json");
    write_json(&p, summary).map_err(|e| io(&p, e))
}

fn execute(cli: &Cli) -> Result<(), RunError> {
    if cli.threads == 0 {
        return Err(RunError::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    let cfg = load(cli.config.as_deref())?;
    let name = cli.command.name();
    if let Some(c) = &cfg.command {
        if c != name {
            return Err(RunError::Config(format!("config is for '{c}' but the command is '{name}'")));
        }
    }
    if let Some(other) = cfg.sections().into_iter().find(|s| *s != name) {
        return Err(RunError::Config(format!("config has a '{other}' section but the command is '{name}'")));
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let (section, out) = dispatch(cli.command, &cfg, seed)?;
    let mut echo = serde_json::Map::new();
    echo.insert("command".into(), json!(name));
    echo.insert("seed".into(), json!(seed));
    echo.insert(name.into(), section);
    let summary = json!({
        "command": name,
        "seed": seed,
        "threads": cli.threads,
        "config": Value::Object(echo),
        "results": out.results,
    });
    write_outputs(&cli.out, &summary, &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Err(e) = execute(&cli) else {
        return ExitCode::SUCCESS;
    };
    let (code, error, kind, message) = match &e {
        RunError::Config(m) => (2, "config", "invalid-config", m.clone()),
        RunError::Io(m) => (1, "io", "io", m.clone()),
        RunError::Stein(s) if s.is_numerical() => (3, "numerical", s.kind(), s.to_string()),
        RunError::Stein(s) => (2, "input", s.kind(), s.to_string()),
    };
    eprintln!("{}", json!({ "error": error, "kind": kind, "message": message }));
    ExitCode::from(code)
}

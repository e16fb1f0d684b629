use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

mod config;
mod tasks;
mod verify;

use config::ExperimentConfig;

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Numerical(geoxray_core::Error),
    Failed(String),
}

impl From<geoxray_core::Error> for RunError {
    fn from(e: geoxray_core::Error) -> Self {
        RunError::Numerical(e)
    }
}

impl RunError {
    fn code(&self) -> u8 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }

    fn report(&self) -> serde_json::Value {
        match self {
            RunError::Config(msg) => json!({ "error": "Config", "message": msg }),
            RunError::Numerical(e) => json!({ "error": e.kind(), "message": e.to_string() }),
            RunError::Failed(msg) => json!({ "error": "VerificationFailed", "message": msg }),
        }
    }
}

#[derive(Parser)]
#[command(name = "geoxray", version, about = "Runs one geoxray experiment from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Run {
        config: PathBuf,
        /// Worker cap for the thread pool.
        #[arg(long, env = "GEOXRAY_THREADS")]
        threads: Option<usize>,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

struct Loaded {
    cfg: ExperimentConfig,
    sha: String,
}

fn load(path: &Path) -> Result<Loaded, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
    let sha = hex::encode(Sha256::digest(text.as_bytes()));
    Ok(Loaded { cfg, sha })
}

fn execute(cli: Cli) -> Result<serde_json::Value, RunError> {
    let Command::Run { config, threads, out, seed, dry_run } = cli.command;
    let Loaded { cfg, sha } = load(&config)?;
    let seed = seed.unwrap_or(cfg.seed);
    tasks::validate(&cfg)?;
    if dry_run {
        return Ok(json!({ "valid": true, "task": cfg.task, "config_sha256": sha }));
    }
    let threads = match threads {
        Some(0) => return Err(RunError::Config("--threads must be at least 1".into())),
        Some(k) => k,
        None => rayon::current_num_threads(),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| RunError::Config(format!("thread pool: {e}")))?;
    let dir = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    tasks::ensure_dir(&dir)?;
    let mut run = tasks::Run { cfg: &cfg, seed, out: dir.clone(), artifacts: Vec::new() };
    let start = Instant::now();
    let summary = tasks::run_task(&mut run)?;
    let elapsed = start.elapsed().as_secs_f64();
    let manifest = json!({
        "task": cfg.task,
        "config": config.display().to_string(),
        "config_sha256": sha,
        "seed": seed,
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
        "timings": { "task_seconds": elapsed },
        "artifacts": run.artifacts,
        "summary": summary,
    });
    geoxray_core::io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(summary)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.code())
        }
    }
}

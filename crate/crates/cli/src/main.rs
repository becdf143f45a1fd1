//! `rskelly`: configuration-driven front end to the solver, simulator,
//! evaluator and learners.

mod config;
mod json;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde::Serialize;

use config::{Mode, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] rskelly_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 1,
            CliError::Io(_) => 3,
            CliError::Core(e) => e.exit_code() as u8,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rskelly", version, about = "Risk-sensitive benchmarked Kelly control toolkit")]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Suppress the summary line.
    #[arg(long)]
    quiet: bool,
}

#[derive(Serialize)]
struct Metadata {
    version: &'static str,
    mode: String,
    config: String,
    seed: Option<u64>,
    paths: Option<usize>,
    threads: usize,
    exit_code: u8,
    timestamp_unix: u64,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("RSKELLY_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| CliError::Schema(format!("RSKELLY_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Schema(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| {
        let cfg = RunConfig::load(&cli.config)?;
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        let overrides = run::Overrides {
            seed: cli.seed,
            paths: cli.paths,
        };
        let summary = run::run(cli.mode, &cfg, &out, &overrides);
        Ok((out, summary))
    });
    let (out, result) = match result {
        Ok((out, r)) => (Some(out), r),
        Err(e) => (None, Err(e)),
    };
    let code = match &result {
        Ok(summary) => {
            if !cli.quiet {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("rskelly: {e}");
            e.exit_code()
        }
    };
    if let Some(out) = out.filter(|o| o.is_dir()) {
        let meta = Metadata {
            version: env!("CARGO_PKG_VERSION"),
            mode: format!("{:?}", cli.mode).to_lowercase(),
            config: cli.config.display().to_string(),
            seed: cli.seed,
            paths: cli.paths,
            threads: rayon::current_num_threads(),
            exit_code: code,
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        if let Err(e) = json::write(&out.join("metadata.json"), &meta) {
            eprintln!("rskelly: cannot write metadata: {e}");
        }
    }
    ExitCode::from(code)
}

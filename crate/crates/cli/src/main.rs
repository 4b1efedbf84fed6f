//! Batch scenario runner: reads a run configuration, executes one task and
//! writes `manifest.json`, `report.json` and CSV outputs.

mod config;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use klplate::PlateError;
use serde_json::json;

use config::{RunConfig, Task};

/// Bumped whenever a report field changes meaning or disappears.
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
        }
    }
}

impl From<PlateError> for CliError {
    fn from(e: PlateError) -> Self {
        match e {
            PlateError::Io(io) => CliError::Io(io),
            e if e.is_validation() => CliError::Validation(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "klplate", version, about = "Run one plate scenario and write machine-readable reports")]
struct Args {
    /// TOML run configuration, or a JSON configuration or manifest.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 1 keeps runs bit-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured task.
    #[arg(long, value_enum)]
    task: Option<Task>,
}

fn run(args: &Args) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    if args.threads == 0 {
        return Err(CliError::Validation("--threads must be at least 1".into()));
    }
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(t) = args.task {
        cfg.task = t;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    cfg.finish()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("klplate-out"));
    std::fs::create_dir_all(&out)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build_global()
        .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;

    let task_start = Instant::now();
    let output = tasks::run(&cfg, &out)?;
    let task_seconds = task_start.elapsed().as_secs_f64();

    let mut report = json!({ "schema_version": SCHEMA_VERSION, "task": cfg.task.name() });
    if let (Some(r), Some(body)) = (report.as_object_mut(), output.report.as_object()) {
        r.extend(body.clone());
    }
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let outputs: Vec<String> = std::iter::once("report.json".to_string()).chain(output.files).collect();
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "config": cfg,
        "threads": args.threads,
        "versions": {
            "klplate-cli": env!("CARGO_PKG_VERSION"),
            "klplate": klplate::VERSION,
        },
        "timings": {
            "task_seconds": task_seconds,
            "total_seconds": start.elapsed().as_secs_f64(),
        },
        "outputs": outputs,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(out)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&args) {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::from(PlateError::InvalidMaterial("mu".into())).exit_code(), 2);
        assert_eq!(CliError::from(PlateError::Numerical("nan".into())).exit_code(), 3);
        assert_eq!(CliError::from(PlateError::EigenFailure { iterations: 1, residual: 1.0 }).exit_code(), 3);
        assert_eq!(CliError::from(PlateError::Factorization("pivot".into())).exit_code(), 3);
    }
}

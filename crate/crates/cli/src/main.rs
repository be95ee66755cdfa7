//! `read-pipeline <command> --config <path> [--seed N] [--variable NAME]`
//!
//! Exit status: 0 on success, 2 on configuration errors, 3 on data errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use read_core::error::Error;
use read_core::pipeline::{run, Command, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "read-pipeline", version, about = "District-level prediction from satellite tiles")]
struct Cli {
    /// One of: ingest, select-tiles, train-extractor, train-pruner, embed,
    /// prune, fit-pca, represent, train-regressor, evaluate, predict,
    /// ablate, heatmap, synth-world.
    command: String,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Demographic variable to model; defaults to `regress.variable`.
    #[arg(long)]
    variable: Option<String>,
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let command: Command = cli.command.parse()?;
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let summary = run(&cfg, command, cli.variable.as_deref())?;
    for out in &summary.outputs {
        println!("{}", cfg.workdir().join(out).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

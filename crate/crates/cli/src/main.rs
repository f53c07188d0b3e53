//! segcascade: phantom cohort generation, normalization, training, cascade
//! inference, evaluation, and the empty-mask analysis, driven by a JSON
//! run config.

use clap::{Args, Parser, Subcommand};
use segcascade_cli::commands;
use segcascade_cli::config::RunConfig;
use segcascade_cli::manifest::load_label_map;
use segcascade_core::error::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "segcascade", version, about = "Cascaded tumor-subregion segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Remap table for foreign label codes (JSON object "<from>": <to>).
    #[arg(long)]
    label_map: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom cohort and its manifest.
    Generate(Common),
    /// Normalize every case's modalities and record the fits.
    Normalize(Common),
    /// Train the selected architecture's per-fold models.
    Train(Common),
    /// Predict labels over the configured split.
    Predict(Common),
    /// Per-case metrics CSV and cohort summary JSON.
    Evaluate(Common),
    /// Per-region empty-mask counts for predictions vs truth.
    ReportEmpties(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Normalize(c)
            | Command::Train(c)
            | Command::Predict(c)
            | Command::Evaluate(c)
            | Command::ReportEmpties(c) => c,
        }
    }
}

fn dispatch(command: &Command) -> Result<()> {
    let common = command.common();
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(&common.config)?;
    let label_map = match &common.label_map {
        Some(path) => Some(load_label_map(path)?),
        None => None,
    };
    let label_map = label_map.as_deref();

    match command {
        Command::Generate(_) => {
            let manifest = commands::generate::run(&cfg)?;
            println!("wrote cohort manifest {}", manifest.display());
        }
        Command::Normalize(_) => {
            let manifest = commands::normalize::run(&cfg)?;
            println!("wrote normalized manifest {}", manifest.display());
        }
        Command::Train(_) => {
            commands::train::run(&cfg, label_map)?;
            println!(
                "wrote {} checkpoints under {}",
                cfg.architecture.as_str(),
                cfg.checkpoints_dir().display()
            );
        }
        Command::Predict(_) => {
            let manifest = commands::predict::run(&cfg)?;
            println!("wrote prediction manifest {}", manifest.display());
        }
        Command::Evaluate(_) => {
            let (csv, json) = commands::evaluate::run(&cfg, label_map)?;
            println!("wrote {} and {}", csv.display(), json.display());
        }
        Command::ReportEmpties(_) => {
            let (report, json) = commands::empties::run(&cfg, label_map)?;
            print!("{}", report.to_table());
            println!("wrote {}", json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

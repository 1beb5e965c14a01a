use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skillfuse_cli::export::{export_heatmap_data, report};
use skillfuse_cli::{parse_config, run_experiment};

#[derive(Parser)]
#[command(name = "skillfuse", version, about = "Continual LoRA fine-tuning with importance-aware fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed, order) triple of a TOML config.
    Run { config: PathBuf },
    /// Write heatmap.csv from a run's importance.csv.
    Heatmap { run_dir: PathBuf },
    /// Print the summary of an experiment or a single run.
    Report { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => parse_config(&config).map_err(anyhow::Error::from).and_then(|cfg| {
            let out = run_experiment(&cfg)?;
            print!("{}", report(&out.output_dir)?);
            eprintln!("{} runs written to {}", out.runs.len(), out.output_dir.display());
            Ok(())
        }),
        Command::Heatmap { run_dir } => export_heatmap_data(&run_dir).map(|p| println!("{}", p.display())),
        Command::Report { run_dir } => report(&run_dir).map(|r| print!("{r}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

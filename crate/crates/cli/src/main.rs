use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use repalign_cli::{prepare, run_pipeline, CliError, Overrides};

#[derive(Parser)]
#[command(name = "repalign", version, about = "Representational alignment between model activations and brain responses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipelines selected in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for the sweep (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and its inputs without computing anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Run { config, workers, out } => {
            let cfg = prepare(&config, &Overrides::from_env(workers, out))?;
            let outcome = run_pipeline(&cfg)?;
            Ok(json!({
                "status": "ok",
                "output_dir": outcome.output_dir,
                "rows": outcome.report.rows.len(),
                "warnings": outcome.report.warnings.len(),
                "files": outcome.files,
            }))
        }
        Command::Validate { config } => {
            let cfg = prepare(&config, &Overrides::from_env(None, None))?;
            Ok(json!({
                "status": "ok",
                "seed": cfg.seed,
                "pipelines": cfg.pipelines,
                "output_dir": cfg.output_dir(),
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = serde_json::to_string(&e.report()).unwrap_or_else(|_| e.to_string());
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

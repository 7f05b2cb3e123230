use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim_cli::{compare_runs, inspect_checkpoint, run_experiment, ExperimentConfig};

/// Federated learning simulation runner.
#[derive(Parser)]
#[command(name = "fedsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Override the number of worker threads used for client training
        /// (1 = sequential).
        #[arg(long)]
        parallel_clients: Option<usize>,
    },
    /// Compare finished runs side by side (CSV on stdout).
    Compare { dirs: Vec<PathBuf> },
    /// Print the contents of a checkpoint file.
    Inspect { checkpoint: PathBuf },
}

// Exit codes: 0 ok, 1 config error, 2 runtime error.
const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, parallel_clients } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(text) => text,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let mut cfg = match ExperimentConfig::from_toml(&text) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if let Some(n) = parallel_clients {
                cfg.experiment.parallel_clients = n.max(1);
            }
            if cfg.experiment.parallel_clients > 1 {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.experiment.parallel_clients)
                    .build_global()
                {
                    eprintln!("warning: could not size the worker pool: {e}");
                }
            }
            match run_experiment(&cfg) {
                Ok(dir) => {
                    println!("run complete: {}", dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
        Command::Compare { dirs } => {
            let refs: Vec<&std::path::Path> = dirs.iter().map(PathBuf::as_path).collect();
            let mut stdout = std::io::stdout().lock();
            match compare_runs(&refs, &mut stdout) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(if dirs.len() < 2 { EXIT_CONFIG } else { EXIT_RUNTIME })
                }
            }
        }
        Command::Inspect { checkpoint } => {
            let mut stdout = std::io::stdout().lock();
            match inspect_checkpoint(&checkpoint, &mut stdout) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}

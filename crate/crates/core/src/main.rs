use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use affinity_xrl::config::PipelineConfig;
use affinity_xrl::pipeline::{cmd_explain, cmd_ingest, cmd_train, run_all, PipelineError};

#[derive(Debug, Parser)]
#[command(
    name = "affinity-xrl",
    version,
    about = "Train affinity-regularized investment agents and explain them with Markov surrogates"
)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Recompute stages whose outputs already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for per-agent stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or synthesize market data and write indicator files.
    Ingest,
    /// Train one agent per personality prototype.
    Train,
    /// Fit surrogates, score fidelity and saliency, export graphs and matrices.
    Explain,
    /// Ingest, train and explain in sequence.
    RunAll,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<Vec<String>, PipelineError> {
    let config = load_config(cli)?;
    Ok(match cli.command {
        Command::Ingest => cmd_ingest(&config, cli.force)?.lines(),
        Command::Train => cmd_train(&config, cli.force)?
            .iter()
            .map(|a| a.line())
            .collect(),
        Command::Explain => cmd_explain(&config, cli.force)?.lines(),
        Command::RunAll => run_all(&config, cli.force)?.lines(),
        Command::PrintConfig => vec![config.to_toml()],
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

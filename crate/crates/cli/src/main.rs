use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use pvvolt_cli::{cmd_cluster, cmd_fit, cmd_qq, cmd_regulate, cmd_report, cmd_simulate, load_config};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    Cluster,
    Fit,
    Qq,
    Regulate,
    Report,
}

/// Stochastic PV voltage-rise modelling and LTC regulation.
#[derive(Debug, Parser)]
#[command(name = "pvvolt", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long, env = "PVVOLT_OUT")]
    out: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, env = "PVVOLT_SEED")]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load_config(&args.config, args.out, args.seed).and_then(|cfg| match args.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Cluster => cmd_cluster(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Qq => cmd_qq(&cfg),
        Command::Regulate => cmd_regulate(&cfg),
        Command::Report => cmd_report(&cfg),
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pvvolt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

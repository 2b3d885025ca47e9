use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbsnn_cli::{cmd_evaluate, cmd_export, cmd_train, parse_config, CliError};

#[derive(Parser)]
#[command(
    name = "fbsnn",
    version,
    about = "Train and evaluate forward-backward stochastic neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes checkpoint, training log and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on fresh test paths.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print checkpoint metadata and per-tensor shapes and norms.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn configure_threads() {
    if let Some(n) = std::env::var("FBSNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            let cfg = parse_config(&config)?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.history.records.last() {
                println!(
                    "trained {} iterations: loss {} y0_pred {}",
                    last.iteration + 1,
                    last.loss,
                    last.y0_pred
                );
            }
            println!("checkpoint: {}", out.checkpoint.display());
            println!("log: {}", out.log.display());
            println!("config: {}", out.resolved_config.display());
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = parse_config(&config)?;
            let out = cmd_evaluate(&cfg, &checkpoint)?;
            let s = &out.summary;
            println!("y0_pred {}", s.y0_pred);
            if let (Some(r), Some(e)) = (s.y0_ref, s.rel_err) {
                println!("y0_ref {r} rel_err {e}");
            }
            if let Some(c) = &out.curves {
                println!("max mean relative error {}", c.max_mean());
            }
            for p in &out.written {
                println!("wrote {}", p.display());
            }
        }
        Command::Export { checkpoint } => print!("{}", cmd_export(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbsnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

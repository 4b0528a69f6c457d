use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use seg2hoi::api::{DEFAULT_LAMBDA, DEFAULT_TOP_K};
use seg2hoi::cli;

#[derive(Parser)]
#[command(name = "seg2hoi", version, about = "Quadruplet HOI detection over a frozen segmentation model")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract foundation outputs and pseudo-labels into the run directory.
    Cache {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the decoder; writes checkpoint.bin and metrics.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the configured evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for eval.json and predictions.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect quadruplets in one PNG.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"))).with_writer(std::io::stderr).init();
    match Args::parse().command {
        Command::Cache { config } => print_json(&cli::cache(&config)?),
        Command::Train { config } => print_json(&cli::train(&config)?),
        Command::Eval { config, checkpoint, out } => print_json(&cli::eval(&config, &checkpoint, out.as_deref())?),
        Command::Infer { image, checkpoint, out, top_k, lambda } => {
            let r = cli::infer(&image, &checkpoint, &out, top_k, lambda)?;
            eprintln!("{} quadruplets written to {}", r.quadruplets.len(), out.display());
            Ok(())
        }
        Command::Serve { checkpoint, port, host } => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(cli::serve(&checkpoint, &host, port))
        }
    }
}

//! Command-line front end wiring the pipeline: pretrain a frozen backbone,
//! learn class prompts through it, classify latents, and run benchmark
//! sweeps. Exit codes: 0 success, 2 config error, 3 numerical divergence,
//! 4 i/o or file-format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gcpl::commands;
use gcpl::config::RunConfig;
use gcpl::harness::Method;

#[derive(Parser)]
#[command(name = "gcpl", version, about = "Generative class-prompt learning at desk scale")]
struct Cli {
    /// Run configuration file (TOML); defaults apply for missing keys.
    #[arg(long, global = true, default_value = "gcpl.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen conditional denoiser backbone and write it to
    /// the configured path.
    Pretrain,
    /// Learn class prompts through the stored backbone and write the
    /// embedding store.
    Train {
        /// Prompt-learning method: "gcpl" or "comple".
        #[arg(long)]
        method: String,
    },
    /// Classify latents with the stored prompts; writes JSON lines.
    Classify {
        /// A .lat file or a folder of .lat files (labels from directory
        /// names). Defaults to the configured dataset's test split.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Run the accuracy-vs-shots sweep and write CSV/JSON reports plus an
    /// SVG plot.
    Benchmark,
    /// Dump any versioned binary file as human-readable text.
    Inspect {
        /// Path to a backbone, embedding-store, or latent file.
        file: PathBuf,
    },
}

fn run(cli: Cli) -> gcpl::Result<()> {
    match cli.command {
        Command::Inspect { file } => {
            let text = commands::cmd_inspect(&file)?;
            print!("{text}");
            Ok(())
        }
        command => {
            let config = RunConfig::load(&cli.config)?;
            match command {
                Command::Pretrain => {
                    let path = commands::cmd_pretrain(&config)?;
                    println!("backbone written to {}", path.display());
                }
                Command::Train { method } => {
                    let method: Method = method.parse()?;
                    let path = commands::cmd_train(method, &config)?;
                    println!("embedding store written to {}", path.display());
                }
                Command::Classify { queries } => {
                    let path = commands::cmd_classify(&config, queries.as_deref())?;
                    println!("report written to {}", path.display());
                }
                Command::Benchmark => {
                    let files = commands::cmd_benchmark(&config)?;
                    for file in files {
                        println!("wrote {}", file.display());
                    }
                }
                Command::Inspect { .. } => unreachable!("handled above"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

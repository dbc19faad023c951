use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ifaseg::commands::{self, GestaltArgs};
use ifaseg_core::gestalt::CrossPairs;

#[derive(Parser)]
#[command(name = "ifaseg", version, about = "Few-shot segmentation with iterative foreground-background adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cross {
    SameCategory,
    DifferentCategory,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic domain and write it as a dataset directory.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Episodic training on the source domain.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a checkpoint on the target supports.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint and write the report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Foreground similarity within and across images.
    AnalyzeGestalt {
        #[arg(long)]
        data: PathBuf,
        /// Compare encoder features instead of pixel colours.
        #[arg(long)]
        feature_space: bool,
        /// Encoder for --feature-space.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "same-category")]
        cross: Cross,
        #[arg(long, default_value_t = 64)]
        pairs_per_image: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for gestalt_report.json and gestalt_report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynth { spec, out } => {
            commands::gen_synth(&spec, &out)?;
        }
        Command::Train { config } => {
            let path = commands::train(&config)?;
            println!("{}", path.display());
        }
        Command::Finetune { config, checkpoint } => {
            let path = commands::finetune(&config, &checkpoint)?;
            println!("{}", path.display());
        }
        Command::Eval { config, checkpoint } => {
            print!("{}", commands::eval(&config, &checkpoint)?.table());
        }
        Command::AnalyzeGestalt {
            data,
            feature_space,
            checkpoint,
            cross,
            pairs_per_image,
            seed,
            out,
        } => {
            let args = GestaltArgs {
                data,
                feature_space,
                checkpoint,
                cross: match cross {
                    Cross::SameCategory => CrossPairs::SameCategory,
                    Cross::DifferentCategory => CrossPairs::DifferentCategory,
                },
                pairs_per_image,
                seed,
                out,
            };
            print!("{}", commands::gestalt(&args)?.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

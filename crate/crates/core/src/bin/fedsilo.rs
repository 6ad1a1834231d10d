use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsilo::commands::{self, Split};
use fedsilo::Result;

#[derive(Parser)]
#[command(name = "fedsilo", about = "Cross-silo federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every silo's synthetic corpus to the configured corpus directory.
    GenData { config: PathBuf },
    /// Federated training; writes a CSV log and `.pv` checkpoints.
    TrainFl {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pooled-data baseline.
    TrainCentral {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Baseline trained on a single silo's data.
    TrainSilo {
        config: PathBuf,
        #[arg(long)]
        silo: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Personalise and interpolate every silo from a federated checkpoint.
    Personalize {
        config: PathBuf,
        #[arg(long = "ckpt-round")]
        ckpt_round: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-silo perplexity of a checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = commands::load_config(&config, None)?;
            for p in commands::gen_data(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::TrainFl { config, out, seed } => {
            let cfg = commands::load_config(&config, seed)?;
            let o = commands::train_fl(&cfg, &out)?;
            println!("final pooled perplexity {}", o.final_eval.pooled);
        }
        Command::TrainCentral { config, out, seed } => {
            let cfg = commands::load_config(&config, seed)?;
            let o = commands::train_central(&cfg, &out)?;
            println!("final pooled perplexity {}", o.final_eval.pooled);
        }
        Command::TrainSilo {
            config,
            silo,
            out,
            seed,
        } => {
            let cfg = commands::load_config(&config, seed)?;
            let o = commands::train_silo(&cfg, silo, &out)?;
            println!("final pooled perplexity {}", o.final_eval.pooled);
        }
        Command::Personalize {
            config,
            ckpt_round,
            out,
        } => {
            let cfg = commands::load_config(&config, None)?;
            commands::personalize(&cfg, ckpt_round, &out)?;
            print!("{}", std::fs::read_to_string(&out).unwrap_or_default());
        }
        Command::Evaluate {
            ckpt,
            config,
            split,
        } => {
            let cfg = commands::load_config(&config, None)?;
            print!("{}", commands::evaluate(&cfg, &ckpt, split)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

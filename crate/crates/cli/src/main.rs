//! `cape`: generate synthetic data, train and evaluate models, and check
//! gradients.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalArgs, GenDataArgs, GradcheckArgs, Split, TrainArgs};

#[derive(Parser)]
#[command(name = "cape", version, about = "Context-aware position encoding for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// JSON run config; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic intent dataset (train/valid/test CSV plus spec).
    GenData {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        intents: Option<usize>,
        /// Fixed context length of every user.
        #[arg(long)]
        context_len: Option<usize>,
        /// Probability of swapping a context item for one of another intent.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train with early stopping; writes checkpoint, history and report.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Restrict to one pair, e.g. `din+cape`.
        #[arg(long)]
        combo: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData {
            shared,
            users,
            items,
            intents,
            context_len,
            noise,
        } => {
            let dir = commands::gen_data(GenDataArgs {
                config: shared.config,
                seed: shared.seed,
                out: shared.out,
                users,
                items,
                intents,
                context_len,
                noise,
            })?;
            println!("wrote {}", dir.display());
        }
        Command::Train {
            shared,
            backbone,
            variant,
            epochs,
        } => {
            let report = commands::train(TrainArgs {
                config: shared.config,
                seed: shared.seed,
                out: shared.out,
                backbone,
                variant,
                epochs,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval {
            shared,
            checkpoint,
            split,
        } => {
            let (report, dest) = commands::eval(EvalArgs {
                config: shared.config,
                seed: shared.seed,
                out: shared.out,
                checkpoint,
                split,
            })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("wrote {}", dest.display());
        }
        Command::Gradcheck { seed, combo, tolerance } => {
            let results = commands::gradcheck(GradcheckArgs { seed, combo, tolerance })?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{}+{:<6} {}  max rel err {:.2e} [{}]",
                    r.backbone,
                    r.variant,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.worst_param
                );
                ok &= r.passed;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} combinations pass at tolerance {tolerance:e}", results.len() - failed, results.len());
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

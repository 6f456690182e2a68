//! Command-line entry points for training, compacting, evaluating,
//! benchmarking, and analyzing gated models.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{precision_from_env, Precision};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "finegates",
    about = "Finetuning by structured sparsification: stochastic row/column gates over frozen weights",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train gates (and biases/head) on a dataset from a key=value config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Binarize a trained checkpoint and physically remove dead rows/columns.
    Compact {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mask rule: `tau` (keep iff deterministic gate > tau) or `support`
        /// (keep iff nonzero).
        #[arg(long, default_value = "tau")]
        policy: String,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Evaluate a gated or compacted checkpoint on a dataset (.csv file or
    /// a config with a data section).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Time masked-dense vs compacted forwards at several sparsity levels.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "0,0.2,0.4")]
        levels: String,
        #[arg(long, default_value_t = 30)]
        repeats: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical landscape experiments: jlower | counterexample | convergence.
    Landscape {
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Gates vs low-rank adapter baseline under identical budgets.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Inclusive range `a..b` or comma list `a,b,c`.
        #[arg(long)]
        seeds: String,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config } => match precision_from_env(Precision::F64)? {
            Precision::F64 => commands::cmd_train::<f64>(&config),
            Precision::F32 => commands::cmd_train::<f32>(&config),
        },
        Cmd::Compact { ckpt, out, policy, tau } => match precision_from_env(Precision::F64)? {
            Precision::F64 => commands::cmd_compact::<f64>(&ckpt, &out, &policy, tau),
            Precision::F32 => commands::cmd_compact::<f32>(&ckpt, &out, &policy, tau),
        },
        Cmd::Eval { ckpt, data } => match precision_from_env(Precision::F64)? {
            Precision::F64 => commands::cmd_eval::<f64>(&ckpt, &data),
            Precision::F32 => commands::cmd_eval::<f32>(&ckpt, &data),
        },
        Cmd::Bench { ckpt, levels, repeats, batch, seed, out } => {
            // timing runs in deployment precision by default
            match precision_from_env(Precision::F32)? {
                Precision::F32 => {
                    commands::cmd_bench::<f32>(&ckpt, &levels, repeats, batch, seed, out.as_deref())
                }
                Precision::F64 => {
                    commands::cmd_bench::<f64>(&ckpt, &levels, repeats, batch, seed, out.as_deref())
                }
            }
        }
        Cmd::Landscape { experiment, out, seed } => {
            commands::cmd_landscape(&experiment, out.as_deref(), seed)
        }
        Cmd::Gradcheck { config } => commands::cmd_gradcheck(&config),
        Cmd::Compare { config, seeds } => commands::cmd_compare(&config, &seeds),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

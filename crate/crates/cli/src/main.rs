mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shefu_core::ShefuError;

#[derive(Parser)]
#[command(name = "shefu", version, about = "Factorized target/destination grounding: data, training, evaluation, scoring, benchmarks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

/// Flags every subcommand understands.
#[derive(Args, Debug)]
pub struct Common {
    /// JSON file of flat dotted keys, e.g. {"train.steps": 2000}
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// overwrite existing output
    #[arg(long, global = true)]
    pub force: bool,
    /// any config key, `--set model.d_model=32`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    GenData {
        /// vocabulary file (one token per line, UNK and PAD first)
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train, keeping the best-validation checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
        /// independent runs with seeds seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Joint-label accuracy of a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// repeatable
        #[arg(long = "split", default_values_t = vec!["test".to_string()])]
        splits: Vec<String>,
    },
    /// Score every candidate pair of one scene
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// scene id; the split's first scene when absent
        #[arg(long)]
        scene: Option<u64>,
        /// also run the M×N brute-force oracle
        #[arg(long)]
        brute: bool,
    },
    /// Time factorized scoring against the brute-force pairs
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn exit_code(e: &ShefuError) -> u8 {
    match e {
        ShefuError::Config(_) => 2,
        ShefuError::Divergence { .. } => 3,
        ShefuError::ArtifactMismatch(_) | ShefuError::Schema(_) | ShefuError::Parse { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.cmd {
        Command::GenData { vocab } => commands::gen_data(c, vocab),
        Command::Train {
            data,
            variant,
            steps,
            eval_every,
            seeds,
        } => commands::train(c, &data, variant, steps, eval_every, seeds),
        Command::Eval {
            checkpoint,
            data,
            splits,
        } => commands::eval(c, &checkpoint, &data, &splits),
        Command::Score {
            checkpoint,
            data,
            split,
            scene,
            brute,
        } => commands::score(c, &checkpoint, &data, &split, scene, brute),
        Command::Bench {
            checkpoint,
            m,
            n,
            repeats,
        } => commands::bench(c, &checkpoint, m, n, repeats),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

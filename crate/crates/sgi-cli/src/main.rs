use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgi_cli::{runner, verify};

/// Self-supervised pretraining and DQN finetuning on a pixel gridworld.
#[derive(Parser)]
#[command(name = "sgi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset (random / policy / mixed regimes).
    Collect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder on an offline dataset.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Objective subset, e.g. "S,G,I" or "BC"; overrides the config.
        #[arg(long)]
        objectives: Option<String>,
        /// Log path (defaults to the checkpoint path with .jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Finetune (DQN + optional SSL) from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Random initialization; any --checkpoint is ignored.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        out_dir: PathBuf,
        /// naive | frozen | reduced; overrides the config.
        #[arg(long)]
        scheme: Option<String>,
        /// Comma-separated seed list, e.g. "0,1,2"; overrides the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Skip the checkpoint/config fingerprint check.
        #[arg(long)]
        force: bool,
    },
    /// Summarize a score CSV into an evaluation report.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        resamples: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the verification suite (gradient checks, identities, oracles).
    Verify,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed '{p}': {e}")))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect { config, out } => runner::cmd_collect(&config, &out),
        Command::Pretrain {
            config,
            dataset,
            out,
            objectives,
            log,
        } => runner::cmd_pretrain(&config, &dataset, &out, objectives.as_deref(), log.as_deref()),
        Command::Finetune {
            config,
            checkpoint,
            scratch,
            out_dir,
            scheme,
            seeds,
            force,
        } => {
            let seeds = match seeds.as_deref().map(parse_seeds).transpose() {
                Ok(s) => s,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return ExitCode::from(2);
                }
            };
            runner::cmd_finetune(
                &config,
                checkpoint.as_deref(),
                scratch,
                &out_dir,
                scheme.as_deref(),
                seeds,
                force,
            )
        }
        Command::Eval {
            scores,
            out,
            resamples,
            seed,
        } => runner::cmd_eval(&scores, out.as_deref(), resamples, seed),
        Command::Verify => {
            let outcomes = verify::run_all(&verify::VerifyOptions::default());
            return if verify::print_table(&outcomes) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

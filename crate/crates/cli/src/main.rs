//! Command-line entry point: train, backtest, compare, synth, features-dump.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sectorq::backbones::BackboneKind;
use sectorq::data::{synth_panel, write_panel, Regime, SynthSpec};
use sectorq::experiment::{
    prepare, run_backtest_files, run_train, summarize_run, ComparisonTable, ExperimentConfig,
    Overrides, Prepared, CHECKPOINT_FILE,
};
use sectorq::par::Execution;

#[derive(Parser)]
#[command(
    name = "sectorq",
    version,
    about = "Hybrid quantum-classical PPO for sector rotation"
)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a PPO agent and write model.ckpt, rewards.csv and resolved.cfg.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split; writes metrics.txt and equity.csv.
    Backtest {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Output directory; defaults to the config file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to evaluate; defaults to model.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tabulate final reward and metrics across run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic panel as delimited text.
    Synth {
        #[arg(long, default_value_t = 47)]
        sectors: usize,
        #[arg(long, default_value_t = 800)]
        days: usize,
        #[arg(long, default_value = "gbm", value_parser = parse_regime)]
        regime: Regime,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the engineered feature matrix as delimited text.
    FeaturesDump {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backbone kind: mlp, lstm, transformer, qnn, qrwkv or qasa.
    #[arg(long)]
    model: Option<BackboneKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Panel file; replaces any data source in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    top_n: Option<usize>,
    /// Training episodes.
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "gbm" => Ok(Regime::Gbm),
        "deterministic-leader" => Ok(Regime::DeterministicLeader),
        _ => Err(format!(
            "unknown regime `{s}` (expected gbm or deterministic-leader)"
        )),
    }
}

/// A failure caused by the user's input rather than by the run itself.
#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

impl ExperimentArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::read(p)?,
            None => ExperimentConfig::default(),
        };
        let overrides = Overrides {
            model: self.model,
            seed: self.seed,
            data: self.data.clone(),
            top_n: self.top_n,
            epochs: self.epochs,
        };
        for line in cfg.apply(&overrides) {
            eprintln!("{line}");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Load data and features, reporting ingestion fixes on stderr.
fn load(cfg: &ExperimentConfig, exec: Execution) -> anyhow::Result<Prepared> {
    let prep = prepare(cfg, exec)?;
    if let Some(r) = &prep.load_report {
        eprint!("{r}");
    }
    Ok(prep)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = exec(cli.sequential);
    match cli.command {
        Command::Train { exp, out } => {
            let cfg = exp.resolve()?;
            let total = cfg.ppo.epochs;
            eprintln!(
                "training {} for {total} episodes, seed {}",
                cfg.backbone.kind, cfg.seed
            );
            let prep = load(&cfg, exec)?;
            let outcome = run_train(&cfg, &prep, &out, exec, |e| {
                eprintln!(
                    "episode {}/{total} total_reward={:.3} mean_entropy={:.4} actor_loss={:.5} critic_loss={:.5}",
                    e.episode + 1,
                    e.total_reward,
                    e.mean_entropy,
                    e.actor_loss,
                    e.critic_loss
                );
            })?;
            let last = outcome.curve.last().map_or(0.0, |e| e.total_reward);
            println!("final_reward={last}");
            println!("outputs written to {}", out.display());
        }
        Command::Backtest {
            exp,
            out,
            checkpoint,
        } => {
            let cfg = exp.resolve()?;
            let out = out
                .or_else(|| {
                    exp.config
                        .as_deref()
                        .and_then(Path::parent)
                        .map(Path::to_path_buf)
                })
                .unwrap_or_else(|| PathBuf::from("."));
            let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            if !ckpt.exists() {
                return Err(invalid(format!(
                    "checkpoint {} does not exist",
                    ckpt.display()
                )));
            }
            let prep = load(&cfg, exec)?;
            let (bt, metrics) = run_backtest_files(&cfg, &prep, &ckpt, &out, exec)?;
            println!("{metrics}");
            println!("test days: {}", bt.curve.values.len());
            print!("{}", metrics.to_key_values());
        }
        Command::Compare { runs, out } => {
            let table = ComparisonTable(runs.iter().map(|r| summarize_run(r)).collect());
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(&p, table.to_string())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Synth {
            sectors,
            days,
            regime,
            seed,
            out,
        } => {
            let panel = synth_panel(&SynthSpec {
                sectors,
                days,
                seed,
                regime,
            })?;
            write_panel(&panel, &out)?;
            println!("wrote {sectors} sectors x {days} days to {}", out.display());
        }
        Command::FeaturesDump { exp, out } => {
            let cfg = exp.resolve()?;
            let prep = load(&cfg, exec)?;
            prep.features.write_csv(&prep.panel, &out)?;
            println!(
                "wrote {} features x {} days to {}",
                prep.features.dim(),
                prep.features.n_days(),
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<InvalidInput>().is_some() {
        return 2;
    }
    match e.downcast_ref::<sectorq::Error>() {
        Some(err) if err.is_input_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use bevl::cli::{cmd_denoise, cmd_eval, cmd_simulate, cmd_train, CmdOutcome};
use bevl::config::{RunConfig, Strategy};

#[derive(Parser)]
#[command(
    name = "bevl",
    about = "Event-guided low-light enhancement testbed: simulate, denoise, train, eval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-scene work; 1 means sequential.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct StrategyArg {
    /// Training strategy; overrides the config (bilevel, joint, alternating).
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired synthetic dataset with its event streams.
    Simulate(Common),
    /// Filter every scene's events with the gradient-guided rule.
    Denoise(Common),
    /// Train the denoiser and enhancer with the configured strategy.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        strategy: StrategyArg,
    },
    /// Score a trained checkpoint and render comparison images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        strategy: StrategyArg,
    },
}

fn load(common: &Common, strategy: Option<Strategy>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?
        .resolve(common.seed, common.out.clone())?;
    if let Some(s) = strategy {
        cfg.train.strategy = s;
    }
    Ok(cfg)
}

fn report(outcome: &CmdOutcome) {
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    println!(
        "wrote {} files under {}",
        outcome.artifacts.len(),
        outcome.dir.display()
    );
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(common) => cmd_simulate(&load(common, None)?)?,
        Command::Denoise(common) => cmd_denoise(&load(common, None)?, common.parallel)?,
        Command::Train { common, strategy } => {
            cmd_train(&load(common, strategy.strategy)?, common.parallel)?
        }
        Command::Eval { common, strategy } => {
            cmd_eval(&load(common, strategy.strategy)?, common.parallel)?
        }
    };
    report(&outcome);
    Ok(())
}

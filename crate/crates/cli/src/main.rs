use std::path::PathBuf;
use std::process::ExitCode;

use asa_core::error::Error;
use asa_core::harness::{
    cmd_eval, cmd_inspect_codec, cmd_sweep, cmd_train_bc, cmd_train_codec, cmd_train_pg, gen_demos,
    ExperimentConfig, Outcome,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "asa",
    version,
    about = "Train and evaluate action space adapters on toy control tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write demonstrations.
    GenDemos(Common),
    /// Fit a VQ or RVQ action codec on the demonstrations.
    TrainCodec(Common),
    /// Behaviour cloning, then greedy evaluation.
    TrainBc(Common),
    /// Policy-gradient training on the grid task.
    TrainPg(Common),
    /// Evaluate a saved checkpoint.
    Eval(Common),
    /// Codec + BC over a range of codebook sizes or counts.
    Sweep(Common),
    /// Print a codec's shape and code usage.
    InspectCodec(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML with env.*, asa.*, policy.*, train.* keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 4,
        Error::Config(_) | Error::ContextOverflow { .. } => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let (common, f): (&Common, fn(&ExperimentConfig) -> Result<Outcome, Error>) = match &cli.command
    {
        Command::GenDemos(c) => (c, gen_demos),
        Command::TrainCodec(c) => (c, cmd_train_codec),
        Command::TrainBc(c) => (c, cmd_train_bc),
        Command::TrainPg(c) => (c, cmd_train_pg),
        Command::Eval(c) => (c, cmd_eval),
        Command::Sweep(c) => (c, cmd_sweep),
        Command::InspectCodec(c) => (c, cmd_inspect_codec),
    };
    f(&common.load()?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{}", out.summary.to_text());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tialab::commands;
use tialab::config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "tialab", about = "Temporal adapter experiments on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file of `key = value` lines with optional `[section]` headers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and save its checkpoint, log and results.
    Train(Common),
    /// Evaluate a saved checkpoint on one split.
    Eval(Common),
    /// Model memory per strategy and measured retained tensors.
    Membench(Common),
    /// One training run per value of an ablation axis.
    Ablate(Common),
    /// Write the synthetic train and test splits as a dataset directory.
    GenData(Common),
}

fn run(cli: Cli) -> tialab::Result<()> {
    let (cmd, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Eval(c) => ("eval", c),
        Command::Membench(c) => ("membench", c),
        Command::Ablate(c) => ("ablate", c),
        Command::GenData(c) => ("gen-data", c),
    };
    let seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(common.config.as_deref(), &common.sets, seed.as_deref())?;
    print!("{}", cfg.echo());
    let out = &common.out;
    commands::write_echo(&cfg, out)?;
    match cmd {
        "train" => {
            let r = commands::train(&cfg, out)?;
            println!("# train mAP {:.6}", r.train.average);
            if let Some(t) = &r.test {
                println!("# test mAP {:.6}", t.average);
            }
        }
        "eval" => {
            let r = commands::eval(&cfg, out)?;
            println!("# {} mAP {:.6}", cfg.eval.split.name(), r.average);
        }
        "membench" => {
            commands::membench(&cfg, out)?;
        }
        "ablate" => {
            commands::ablate(&cfg, out)?;
        }
        _ => commands::gen_data(&cfg, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

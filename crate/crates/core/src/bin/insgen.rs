use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use insgen::experiment::{self, ExpError, Preset};

#[derive(Parser)]
#[command(name = "insgen", about = "Instance-discrimination GAN lab on low-dimensional data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults are used when omitted.
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set trainer.steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an identical configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the averaged generator stored in a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// CSV table to evaluate against instead of the stored config's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Run ablation presets (baseline, +cr, +cf_vanilla, +cf, +cfg).
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Presets to run, comma separated; all five when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        preset: Vec<String>,
    },
    /// Sweep the fake-queue capacity.
    SweepQueue {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        lengths: Vec<i64>,
        /// Run the sweep's configurations concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn env_overrides() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with("INSGEN_")).collect()
}

fn run(cli: Cli) -> Result<(), ExpError> {
    let env = env_overrides();
    let load = |c: &ConfigArgs| experiment::load_config(c.config.as_deref(), &env, &c.overrides);
    match cli.cmd {
        Cmd::Train { cfg, resume } => {
            let run = experiment::cmd_train(&load(&cfg)?, &cfg.out, resume.as_deref())?;
            if let Some(r) = run.last() {
                println!("step {} frechet {:.5} coverage {:?}", r.step, r.frechet, r.mode_coverage);
            }
        }
        Cmd::Eval { checkpoint, dataset, out } => {
            let m = experiment::cmd_eval(&checkpoint, dataset.as_deref(), &out)?;
            for (k, v) in m {
                println!("{k}: {v}");
            }
        }
        Cmd::Ablate { cfg, preset } => {
            let presets = if preset.is_empty() {
                Preset::ALL.to_vec()
            } else {
                preset.iter().map(|p| p.parse()).collect::<Result<_, _>>()?
            };
            for r in experiment::cmd_ablate(&load(&cfg)?, &presets, &cfg.out)? {
                println!("{:12} frechet {:.5} coverage {:?}", r.label, r.frechet, r.mode_coverage);
            }
        }
        Cmd::SweepQueue { cfg, lengths, parallel } => {
            for r in experiment::cmd_sweep_queue(&load(&cfg)?, &lengths, &cfg.out, parallel)? {
                println!("queue {:>5} frechet {:.5} coverage {:?}", r.label, r.frechet, r.mode_coverage);
            }
        }
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

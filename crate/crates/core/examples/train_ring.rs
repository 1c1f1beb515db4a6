//! Trains full InsGen on the 8-mode ring and writes metrics, checkpoints and
//! plots to an output directory.
//!
//!     cargo run --release --example train_ring -- [steps] [out-dir]

use std::path::PathBuf;

use insgen::config::RunConfig;
use insgen::experiment::train_to_dir;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(3000);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| "runs/train_ring".into());

    let mut cfg = RunConfig::default();
    cfg.trainer.steps = steps;
    cfg.trainer.eval_every = (steps / 10).max(1);
    let run = train_to_dir(&cfg, &out, None).unwrap();

    println!("{:>7} {:>9} {:>8} {:>6} {:>9} {:>9}", "step", "frechet", "coverage", "hq", "real", "fake");
    for r in &run.records {
        println!(
            "{:>7} {:>9.5} {:>8} {:>6.3} {:>9.4} {:>9.4}",
            r.step,
            r.frechet,
            r.mode_coverage.unwrap_or(0),
            r.hq_fraction.unwrap_or(0.0),
            r.mean_real_logit.unwrap_or(f64::NAN),
            r.mean_fake_logit.unwrap_or(f64::NAN)
        );
    }
    println!("outputs in {}", out.display());
}

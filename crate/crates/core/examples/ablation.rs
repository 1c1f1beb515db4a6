//! Runs the five ablation presets on the ring with one seed and prints the
//! final metrics of each.
//!
//!     cargo run --release --example ablation -- [steps] [seed]

use insgen::config::RunConfig;
use insgen::experiment::{cmd_ablate, Preset};

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);

    let mut cfg = RunConfig::default();
    cfg.trainer.steps = steps;
    cfg.trainer.seed = seed;
    cfg.trainer.eval_every = (steps / 4).max(1);
    let out = std::path::Path::new("runs/ablation");
    let rows = cmd_ablate(&cfg, &Preset::ALL, out).unwrap();
    println!("{:12} {:>9} {:>8} {:>6}", "preset", "frechet", "coverage", "hq");
    for r in rows {
        println!(
            "{:12} {:>9.5} {:>8} {:>6.3}",
            r.label,
            r.frechet,
            r.mode_coverage.unwrap_or(0),
            r.hq_fraction.unwrap_or(0.0)
        );
    }
    println!("table in {}", out.join("ablation.csv").display());
}

//! Sweeps the fake-queue capacity and prints final Fréchet per length.
//!
//!     cargo run --release --example queue_sweep -- [steps] [lengths]

use insgen::config::RunConfig;
use insgen::experiment::cmd_sweep_queue;

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let lengths: Vec<i64> = args
        .next()
        .unwrap_or_else(|| "8,32,128,512".into())
        .split(',')
        .map(|s| s.parse().expect("queue length"))
        .collect();

    let mut cfg = RunConfig::default();
    cfg.trainer.steps = steps;
    cfg.trainer.eval_every = steps.max(1);
    let out = std::path::Path::new("runs/queue_sweep");
    for r in cmd_sweep_queue(&cfg, &lengths, out, false).unwrap() {
        println!("queue {:>5}: frechet {:.5} coverage {:?}", r.label, r.frechet, r.mode_coverage);
    }
    println!("plot in {}", out.join("queue_sweep.svg").display());
}

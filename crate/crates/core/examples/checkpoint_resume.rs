//! Trains for a while, saves, restores and continues, then compares with an
//! uninterrupted run of the same length.
//!
//!     cargo run --release --example checkpoint_resume

use insgen::checkpoint::{restore_for_resume, to_checkpoint, Checkpoint};
use insgen::config::RunConfig;
use insgen::trainer::{Collect, Trainer};

fn main() {
    let mut cfg = RunConfig::default();
    cfg.trainer.steps = 600;
    cfg.trainer.eval_every = 100;

    let mut whole = Trainer::new(cfg.clone(), cfg.build_data().unwrap()).unwrap();
    let mut a = Collect::default();
    whole.run(&mut a).unwrap();

    let mut first = cfg.clone();
    first.trainer.steps = 300;
    let mut t = Trainer::new(first.clone(), first.build_data().unwrap()).unwrap();
    let mut b = Collect::default();
    t.run(&mut b).unwrap();
    let bytes = to_checkpoint(&t.state, &first).to_bytes();
    println!("checkpoint at step {}: {} bytes", t.state.step, bytes.len());

    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let data = cfg.build_data().unwrap();
    let state = restore_for_resume(&ck, &cfg, data.train.len(), data.train.dim()).unwrap();
    let mut resumed = Trainer::resume(cfg, data, state).unwrap();
    resumed.run(&mut b).unwrap();

    let same = a.records == b.records;
    println!("resumed metrics identical to uninterrupted run: {same}");
    for (x, y) in a.records.iter().zip(&b.records) {
        println!("step {:>4}: frechet {:.10} vs {:.10}", x.step, x.frechet, y.frechet);
    }
}

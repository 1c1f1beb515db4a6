//! InfoNCE on hand-made unit vectors, and how the loss responds to the
//! temperature and to the alignment of the positive key.
//!
//!     cargo run --release --example info_nce

use insgen::contrastive::info_nce;
use insgen::{Graph, Tensor};

fn unit(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn loss(q_angle: f64, k_angle: f64, negatives: &[f64], tau: f64) -> f64 {
    let mut g = Graph::strict();
    let q = g.param(Tensor::matrix(1, 2, unit(q_angle).to_vec()));
    let k = g.constant(Tensor::matrix(1, 2, unit(k_angle).to_vec()));
    let n = g.constant(Tensor::matrix(
        negatives.len(),
        2,
        negatives.iter().flat_map(|&a| unit(a)).collect(),
    ));
    let l = info_nce(&mut g, q, k, n, tau).unwrap();
    g.value(l).item()
}

fn main() {
    let negs = [1.5, 3.0, 4.5];
    println!("{:>8} {:>12} {:>12} {:>12}", "tau", "aligned", "45 degrees", "opposite");
    for tau in [0.1, 0.5, 2.0, 8.0] {
        println!(
            "{tau:>8} {:>12.6} {:>12.6} {:>12.6}",
            loss(0.0, 0.0, &negs, tau),
            loss(0.0, std::f64::consts::FRAC_PI_4, &negs, tau),
            loss(0.0, std::f64::consts::PI, &negs, tau),
        );
    }
    // With every key identical to the query the loss is log(1 + N).
    println!("all keys equal, N=3: {:.6} (log 4 = {:.6})", loss(0.0, 0.0, &[0.0, 0.0, 0.0], 2.0), 4f64.ln());
}

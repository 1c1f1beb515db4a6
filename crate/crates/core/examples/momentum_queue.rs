//! The momentum encoder converging to a frozen online encoder, and the
//! feature queue's first-in-first-out behaviour and warmup.
//!
//!     cargo run --release --example momentum_queue

use insgen::contrastive::FeatureQueue;
use insgen::nets::{build_discriminator, momentum_update};
use insgen::Tensor;

fn distance(a: &insgen::nets::DiscriminatorBundle, b: &insgen::nets::DiscriminatorBundle) -> f64 {
    a.tensors()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)))
        .sum::<f64>()
        .sqrt()
}

fn main() {
    let online = build_discriminator(2, &[16], 16, 8, 0).unwrap();
    let mut momentum = build_discriminator(2, &[16], 16, 8, 1).unwrap();
    let alpha = 0.99;
    let d0 = distance(&online, &momentum);
    for k in 1..=500 {
        momentum_update(&online, &mut momentum, alpha).unwrap();
        if k % 100 == 0 {
            let d = distance(&online, &momentum);
            println!("after {k:>3} updates: distance {d:.6e}  (alpha^k * d0 = {:.6e})", alpha.powi(k) * d0);
        }
    }

    let mut q = FeatureQueue::new(4, 2);
    for i in 0..6 {
        let a = i as f64;
        q.push(&Tensor::matrix(1, 2, vec![a.cos(), a.sin()]), true).unwrap();
        println!(
            "pushed key {i}: len {} warm(25%) {} oldest {:?}",
            q.len(),
            q.is_warm(0.25),
            q.entries().next().map(|r| [r[0].acos().round()])
        );
    }
}

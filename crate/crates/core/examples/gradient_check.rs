//! Checks backward passes against central differences for a few composite
//! expressions, including the R1 penalty's double backward.
//!
//!     cargo run --release --example gradient_check

use insgen::gradcheck::grad_check;
use insgen::losses::r1_penalty;
use insgen::nets::build_discriminator;
use insgen::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(4, 3, &mut rng);

    let softplus_mean = grad_check(|g, x| { let s = g.softplus(x)?; g.mean(s) }, &x, 1e-5).unwrap();
    println!("mean(softplus(x))            max rel err {softplus_mean:.2e}");

    let lse = grad_check(|g, x| { let n = g.l2_normalize_rows(x)?; let l = g.logsumexp_rows(n)?; g.sum(l) }, &x, 1e-5).unwrap();
    println!("sum(logsumexp(normalize(x))) max rel err {lse:.2e}");

    let disc = build_discriminator(3, &[8, 8], 8, 4, 3).unwrap();
    let r1 = grad_check(
        |g: &mut Graph, x| {
            let d = disc.bind_as(g, false);
            Ok(r1_penalty(g, &d, x, 1.0)?.0)
        },
        &x,
        1e-5,
    )
    .unwrap();
    // The nets are piecewise linear, so this gradient is exactly zero.
    println!("R1 penalty w.r.t. inputs     max rel err {r1:.2e}");
}

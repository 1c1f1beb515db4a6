//! Fréchet distance between Gaussian fits, checked against the closed form
//! for diagonal covariances, plus the PSD square root it relies on.
//!
//!     cargo run --release --example frechet

use insgen::metrics::{frechet_between, frechet_distance, matrix_sqrt_psd, GaussianFit};
use insgen::tensor::matmul;
use insgen::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let a = GaussianFit::from_parts(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 4.0]);
    let b = GaussianFit::from_parts(vec![1.0, -1.0], vec![9.0, 0.0, 0.0, 1.0]);
    // |μa-μb|² + Σ (σa - σb)² for diagonal covariances
    let closed = 2.0 + (1.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2);
    println!("diagonal pair: {:.12} closed form {closed:.12}", frechet_distance(&a, &b).unwrap());

    let s = Tensor::matrix(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
    let r = matrix_sqrt_psd(&s).unwrap();
    let back = matmul(&r, &r);
    let err: f64 = back.data().iter().zip(s.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    println!("sqrt reconstruction error: {err:.2e}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = Normal::new(0.0, 1.0).unwrap();
    let draw = |shift: f64, rng: &mut ChaCha8Rng| {
        Tensor::matrix(5000, 2, (0..10000).map(|_| n.sample(rng) + shift).collect())
    };
    let x = draw(0.0, &mut rng);
    for shift in [0.0, 0.1, 0.5, 1.0] {
        let y = draw(shift, &mut rng);
        println!("shift {shift:>4}: sample frechet {:.4}  (expected ≈ {:.4})", frechet_between(&x, &y).unwrap(), 2.0 * shift * shift);
    }
}

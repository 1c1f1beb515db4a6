//! Evaluation metrics: Fréchet distance between fitted Gaussians, mode
//! coverage, a memorization gap, and discriminator-logit traces.
//!
//! The Fréchet distance here is computed on raw coordinates; it plays the
//! role FID plays for images but involves no feature extractor. Covariances
//! use `1/M` normalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not square: {0:?}")]
    NotSquare(Vec<usize>),
    #[error("empty {0}")]
    Empty(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_parts(mean: Vec<f64>, cov: Vec<f64>) -> Self {
        assert_eq!(cov.len(), mean.len() * mean.len());
        GaussianFit { mean, cov, n: 0 }
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

pub fn fit_gaussian(samples: &Tensor) -> Result<GaussianFit, MetricError> {
    let (m, d) = (samples.rows(), samples.cols());
    if m < 2 {
        return Err(MetricError::TooFew { need: 2, got: m });
    }
    let mut mean = vec![0.0; d];
    for row in samples.row_iter() {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut cov = vec![0.0; d * d];
    for row in samples.row_iter() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / m as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianFit { mean, cov, n: m })
}

fn sqrt_sym(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<(), MetricError> {
    let scale = 1.0 + s.amax();
    let asym = (s - s.transpose()).amax();
    if asym > 1e-9 * scale {
        return Err(MetricError::Asymmetric(asym));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// with negative eigenvalues clipped to zero.
pub fn matrix_sqrt_psd(s: &Tensor) -> Result<Tensor, MetricError> {
    if s.shape().len() != 2 || s.rows() != s.cols() {
        return Err(MetricError::NotSquare(s.shape().to_vec()));
    }
    let n = s.rows();
    let m = DMatrix::from_row_slice(n, n, s.data());
    check_symmetric(&m)?;
    let sym = (&m + m.transpose()) * 0.5;
    let r = sqrt_sym(&sym);
    let data = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
    Ok(Tensor::matrix(n, n, data))
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, clipped at zero.
///
/// The cross term is evaluated as `Tr((Σa^½ Σb Σa^½)^½)`, which is symmetric
/// PSD and so admits the eigendecomposition route.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::Dim(a.dim(), b.dim()));
    }
    let mu = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    check_symmetric(&sa)?;
    check_symmetric(&sb)?;
    let ra = sqrt_sym(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_sym(&inner).trace();
    let d = mu.norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two sample sets.
pub fn frechet_between(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    frechet_distance(&fit_gaussian(a)?, &fit_gaussian(b)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeCoverage {
    pub covered: usize,
    pub hq_fraction: f64,
    /// Samples within the radius, per mode.
    pub per_mode: Vec<usize>,
}

/// Assigns each sample to its nearest center; a mode is covered when at least
/// one sample lies within `mult·σ` of it.
pub fn mode_coverage(samples: &Tensor, centers: &[Vec<f64>], sigma: f64, mult: f64) -> ModeCoverage {
    assert!(!centers.is_empty(), "mode_coverage needs at least one center");
    let r2 = (mult * sigma).powi(2);
    let mut per_mode = vec![0usize; centers.len()];
    let mut hq = 0usize;
    for row in samples.row_iter() {
        let (mut best, mut k) = (f64::INFINITY, 0);
        for (i, c) in centers.iter().enumerate() {
            let d: f64 = c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best {
                best = d;
                k = i;
            }
        }
        if best <= r2 {
            per_mode[k] += 1;
            hq += 1;
        }
    }
    ModeCoverage {
        covered: per_mode.iter().filter(|&&c| c > 0).count(),
        hq_fraction: hq as f64 / samples.rows() as f64,
        per_mode,
    }
}

fn mean_nn_distance(from: &Tensor, to: &Tensor) -> f64 {
    let mut total = 0.0;
    for a in from.row_iter() {
        let mut best = f64::INFINITY;
        for b in to.row_iter() {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d);
        }
        total += best.sqrt();
    }
    total / from.rows() as f64
}

/// Mean nearest-neighbour distance from `fakes` to `train`, minus the same
/// to `holdout`. Strongly negative values mean the fakes hug the training set.
pub fn memorization_gap(fakes: &Tensor, train: &Tensor, holdout: &Tensor) -> Result<f64, MetricError> {
    for (t, what) in [(fakes, "fakes"), (train, "train"), (holdout, "holdout")] {
        if t.numel() == 0 {
            return Err(MetricError::Empty(what));
        }
    }
    if fakes.cols() != train.cols() || fakes.cols() != holdout.cols() {
        return Err(MetricError::Dim(train.cols(), holdout.cols()));
    }
    Ok(mean_nn_distance(fakes, train) - mean_nn_distance(fakes, holdout))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitPoint {
    pub step: u64,
    pub real: f64,
    pub fake: f64,
}

/// Summary of how well real and fake logits are separated over a trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    /// Mean of `real − fake`.
    pub mean_gap: f64,
    /// Fraction of points with `real > fake`.
    pub separated_fraction: f64,
    /// Fraction of consecutive pairs along which the gap does not shrink.
    pub monotone_fraction: f64,
}

pub fn separation(trace: &[LogitPoint]) -> Option<Separation> {
    if trace.is_empty() {
        return None;
    }
    let gaps: Vec<f64> = trace.iter().map(|p| p.real - p.fake).collect();
    let n = gaps.len() as f64;
    let monotone = if gaps.len() < 2 {
        1.0
    } else {
        gaps.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / (gaps.len() - 1) as f64
    };
    Some(Separation {
        mean_gap: gaps.iter().sum::<f64>() / n,
        separated_fraction: gaps.iter().filter(|&&g| g > 0.0).count() as f64 / n,
        monotone_fraction: monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fit1(mean: f64, var: f64) -> GaussianFit {
        GaussianFit::from_parts(vec![mean], vec![var])
    }

    #[test]
    fn fit_hand_cases() {
        let f = fit_gaussian(&Tensor::matrix(2, 1, vec![1.0, -1.0])).unwrap();
        assert_eq!((f.mean[0], f.cov[0]), (0.0, 1.0));
        let f = fit_gaussian(&Tensor::from_rows(&[[2.0, 3.0], [2.0, 3.0], [2.0, 3.0]])).unwrap();
        assert!(f.cov.iter().all(|&c| c == 0.0));
        assert!(fit_gaussian(&Tensor::from_rows(&[[1.0]])).is_err());
    }

    #[test]
    fn fit_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let data: Vec<f64> = (0..2 * n).map(|_| rng.sample(StandardNormal)).collect();
        let f = fit_gaussian(&Tensor::matrix(n, 2, data)).unwrap();
        assert!((f.cov[0] - 1.0).abs() < 0.03 && (f.cov[3] - 1.0).abs() < 0.03);
        assert!(f.cov[1].abs() < 0.03);
    }

    #[test]
    fn frechet_closed_forms() {
        assert_eq!(frechet_distance(&fit1(0.3, 2.0), &fit1(0.3, 2.0)).unwrap(), 0.0);
        assert!((frechet_distance(&fit1(0.0, 1.0), &fit1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((frechet_distance(&fit1(0.0, 1.0), &fit1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            frechet_distance(&fit1(0.0, 1.0), &GaussianFit::from_parts(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])),
            Err(MetricError::Dim(1, 2))
        ));
    }

    #[test]
    fn frechet_is_symmetric_on_full_covariances() {
        let a = GaussianFit::from_parts(vec![0.1, 0.2], vec![2.0, 0.7, 0.7, 1.0]);
        let b = GaussianFit::from_parts(vec![-1.0, 0.5], vec![0.5, -0.2, -0.2, 3.0]);
        let (x, y) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-9 && x > 0.0);
    }

    #[test]
    fn sqrt_cases() {
        assert_eq!(matrix_sqrt_psd(&Tensor::eye(3)).unwrap(), Tensor::eye(3));
        let r = matrix_sqrt_psd(&Tensor::from_rows(&[[4.0, 0.0], [0.0, 9.0]])).unwrap();
        assert!(r.data().iter().zip([2.0, 0.0, 0.0, 3.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(
            matrix_sqrt_psd(&Tensor::from_rows(&[[1.0, 2.0], [0.0, 1.0]])),
            Err(MetricError::Asymmetric(_))
        ));
    }

    #[test]
    fn coverage_cases() {
        let centers = crate::datasets::ring_centers(8, 2.0);
        let at_centers = Tensor::from_rows(&centers);
        let c = mode_coverage(&at_centers, &centers, 0.05, 3.0);
        assert_eq!((c.covered, c.hq_fraction), (8, 1.0));
        let collapsed = Tensor::from_rows(&vec![centers[3].clone(); 10]);
        assert_eq!(mode_coverage(&collapsed, &centers, 0.05, 3.0).covered, 1);
    }

    #[test]
    fn coverage_of_uniform_ring() {
        // Points uniform on the ring's circle pass within 3σ of every center.
        let centers = crate::datasets::ring_centers(8, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                vec![2.0 * a.cos(), 2.0 * a.sin()]
            })
            .collect();
        assert_eq!(mode_coverage(&Tensor::from_rows(&pts), &centers, 0.05, 3.0).covered, 8);
    }

    #[test]
    fn memorization_cases() {
        let train = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let holdout = Tensor::from_rows(&[[0.0, 1.0], [1.0, 1.0]]);
        assert!(memorization_gap(&train, &train, &holdout).unwrap() < 0.0);
        let mid = Tensor::from_rows(&[[0.0, 0.5]]);
        assert_eq!(memorization_gap(&mid, &train, &holdout).unwrap(), 0.0);
    }

    #[test]
    fn separation_fixture() {
        let pts = [(0, 0.5, 0.5), (1, 1.0, 0.0), (2, 0.5, 0.0), (3, 2.0, -1.0)]
            .map(|(s, r, f)| LogitPoint { step: s, real: r, fake: f });
        let s = separation(&pts).unwrap();
        // gaps 0, 1, 0.5, 3
        assert_eq!(s.mean_gap, 1.125);
        assert_eq!(s.separated_fraction, 0.75);
        assert!((s.monotone_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(separation(&[]).is_none());
    }
}

//! Differentiable augmentations for vector data and the adaptive strength
//! controller.
//!
//! Every op here is affine in the sample, so one sample's augmentation is a
//! single `x·M + t`. Draws are taken per sample from its own sub-stream and
//! materialized as a [`RowAffine`] before being applied, which means a batch
//! of draws can be replayed exactly (gradient checks rely on this).

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, RowAffine, RowMap, Var};
use crate::rng::{substream, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentOp {
    /// `x ↦ −x`.
    SignFlip,
    /// Rotation of the first two coordinates by a uniform angle in
    /// `±max_deg` degrees. No-op for 1-D data.
    Rotation { max_deg: f64 },
    /// Additive isotropic Gaussian noise.
    AdditiveNoise { sigma: f64 },
    /// Isotropic scaling by `exp(u)`, `u` uniform in `±log_range`.
    Scaling { log_range: f64 },
    /// Shift by a vector uniform in `[−range, range]^d`.
    Translation { range: f64 },
}

/// Augmentation pipeline and adaptive controller settings.
///
/// `p` is the starting probability with which each op fires, independently
/// per op and per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub ops: Vec<AugmentOp>,
    pub p: f64,
    /// Adjust `p` from discriminator overfitting statistics.
    pub adaptive: bool,
    pub target: f64,
    pub step_size: f64,
    /// Number of recent batches averaged by the controller.
    pub window: usize,
    /// Adjust `p` once every this many batches.
    pub interval: usize,
    pub p_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            ops: vec![
                AugmentOp::SignFlip,
                AugmentOp::Rotation { max_deg: 10.0 },
                AugmentOp::Scaling { log_range: 0.1 },
                AugmentOp::Translation { range: 0.05 },
                AugmentOp::AdditiveNoise { sigma: 0.02 },
            ],
            p: 0.0,
            adaptive: true,
            target: 0.6,
            step_size: 0.01,
            window: 4,
            interval: 4,
            p_max: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("augment.{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |field, msg: &str| Err(AugmentError::Invalid { field, msg: msg.to_string() });
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.p_max) {
            return bad("p_max", "must lie in [0, 1]");
        }
        if self.window == 0 {
            return bad("window", "must be positive");
        }
        if self.interval == 0 {
            return bad("interval", "must be positive");
        }
        if !(self.step_size >= 0.0) {
            return bad("step_size", "must be non-negative");
        }
        for op in &self.ops {
            let ok = match *op {
                AugmentOp::SignFlip => true,
                AugmentOp::Rotation { max_deg } => max_deg >= 0.0,
                AugmentOp::AdditiveNoise { sigma } => sigma >= 0.0,
                AugmentOp::Scaling { log_range } => log_range >= 0.0,
                AugmentOp::Translation { range } => range >= 0.0,
            };
            if !ok {
                return bad("ops", &format!("{op:?} has a negative range"));
            }
        }
        Ok(())
    }
}

/// Draws one sample's composite affine map, or `None` if no op fired.
///
/// Every op consumes the same number of draws whether or not it fires, so a
/// change in `p` never shifts the randomness seen by later ops.
pub fn draw_row<R: Rng>(ops: &[AugmentOp], p: f64, dim: usize, rng: &mut R) -> Option<RowMap> {
    let mut matrix: Option<Vec<f64>> = None;
    let mut offset = vec![0.0; dim];
    let mut fired = false;
    for op in ops {
        let fire = rng.random::<f64>() < p;
        // (linear part, translation) of this op, drawn unconditionally
        let (lin, shift): (Option<Vec<f64>>, Option<Vec<f64>>) = match *op {
            AugmentOp::SignFlip => (Some(scaled_identity(dim, -1.0)), None),
            AugmentOp::Rotation { max_deg } => {
                let theta = rng.random_range(-1.0..=1.0) * max_deg.to_radians();
                if dim < 2 {
                    (None, None)
                } else {
                    let (s, c) = theta.sin_cos();
                    let mut m = scaled_identity(dim, 1.0);
                    m[0] = c;
                    m[1] = s;
                    m[dim] = -s;
                    m[dim + 1] = c;
                    (Some(m), None)
                }
            }
            AugmentOp::AdditiveNoise { sigma } => {
                let n: Vec<f64> = (0..dim)
                    .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect();
                (None, Some(n))
            }
            AugmentOp::Scaling { log_range } => {
                let u = rng.random_range(-1.0..=1.0) * log_range;
                (Some(scaled_identity(dim, u.exp())), None)
            }
            AugmentOp::Translation { range } => {
                let t: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0) * range).collect();
                (None, Some(t))
            }
        };
        if !fire {
            continue;
        }
        fired = true;
        // x' = (x·M + t)·L + s  =  x·(M·L) + (t·L + s)
        if let Some(l) = lin {
            offset = vec_mat(&offset, &l, dim);
            matrix = Some(match matrix {
                None => l,
                Some(m) => mat_mat(&m, &l, dim),
            });
        }
        if let Some(s) = shift {
            offset.iter_mut().zip(&s).for_each(|(o, v)| *o += v);
        }
    }
    fired.then(|| RowMap {
        matrix: matrix.unwrap_or_else(|| scaled_identity(dim, 1.0)),
        offset,
    })
}

fn scaled_identity(d: usize, s: f64) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = s;
    }
    m
}

fn vec_mat(v: &[f64], m: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|j| (0..d).map(|i| v[i] * m[i * d + j]).sum()).collect()
}

fn mat_mat(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Draws for a batch whose sample `r` uses sub-stream `ids[r]` of `seed`.
pub fn draws_from_streams(ops: &[AugmentOp], p: f64, dim: usize, seed: u64, ids: &[u64]) -> RowAffine {
    let rows = ids
        .iter()
        .map(|&id| draw_row(ops, p, dim, &mut substream(seed, id)))
        .collect();
    RowAffine { dim, rows }
}

/// Draws for a `rows × dim` batch, one fresh sub-stream per sample.
pub fn sample_draws(ops: &[AugmentOp], p: f64, rows: usize, dim: usize, rng: &mut StreamRng) -> RowAffine {
    let base = rng.reserve(rows as u64);
    let ids: Vec<u64> = (base..base + rows as u64).collect();
    draws_from_streams(ops, p, dim, rng.seed(), &ids)
}

/// Applies pre-drawn augmentations inside a graph. Identity draws return the
/// input node itself.
pub fn apply_draws(g: &mut Graph, x: Var, draws: &RowAffine) -> Result<Var, GraphError> {
    if draws.is_identity() && draws.rows.len() == g.value(x).rows() {
        return Ok(x);
    }
    g.row_affine(x, Arc::new(draws.clone()))
}

/// Augments a batch on the graph with probability `p` per op per sample.
pub fn apply(g: &mut Graph, x: Var, cfg: &AugmentConfig, p: f64, rng: &mut StreamRng) -> Result<Var, GraphError> {
    let t = g.value(x);
    let draws = sample_draws(&cfg.ops, p, t.rows(), t.cols(), rng);
    apply_draws(g, x, &draws)
}

/// Plain-tensor counterpart of [`apply`].
pub fn apply_tensor(x: &Tensor, cfg: &AugmentConfig, p: f64, rng: &mut StreamRng) -> Tensor {
    let draws = sample_draws(&cfg.ops, p, x.rows(), x.cols(), rng);
    draws.apply(x)
}

/// Adaptive augmentation controller.
///
/// Tracks the mean sign of real-sample logits over a short window and nudges
/// `p` up when the discriminator looks overconfident on reals, down otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaState {
    pub p: f64,
    pub target: f64,
    pub step_size: f64,
    pub p_max: f64,
    pub window_len: usize,
    pub interval: usize,
    pub window: VecDeque<f64>,
    pub updates: u64,
}

impl AdaState {
    pub fn new(cfg: &AugmentConfig) -> Self {
        AdaState {
            p: cfg.p.min(cfg.p_max),
            target: cfg.target,
            step_size: cfg.step_size,
            p_max: cfg.p_max,
            window_len: cfg.window,
            interval: cfg.interval,
            window: VecDeque::with_capacity(cfg.window),
            updates: 0,
        }
    }

    pub fn window_mean(&self) -> f64 {
        self.window.iter().sum::<f64>() / self.window.len().max(1) as f64
    }

    /// Records one batch of real logits; every `interval` calls moves `p` by
    /// one step toward keeping the window mean at `target`.
    pub fn update(&mut self, real_logits: &Tensor) {
        let sign_mean = real_logits.data().iter().map(|&x| sign(x)).sum::<f64>() / real_logits.numel() as f64;
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(sign_mean);
        self.updates += 1;
        if self.updates % self.interval as u64 != 0 {
            return;
        }
        let m = self.window_mean();
        let dir = if m > self.target {
            1.0
        } else if m < self.target {
            -1.0
        } else {
            0.0
        };
        self.p = (self.p + dir * self.step_size).clamp(0.0, self.p_max);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;

    fn all_ops() -> Vec<AugmentOp> {
        vec![
            AugmentOp::SignFlip,
            AugmentOp::Rotation { max_deg: 30.0 },
            AugmentOp::AdditiveNoise { sigma: 0.1 },
            AugmentOp::Scaling { log_range: 0.3 },
            AugmentOp::Translation { range: 0.2 },
        ]
    }

    fn controller(target: f64, step: f64, p: f64, window: usize) -> AdaState {
        let cfg = AugmentConfig {
            p,
            target,
            step_size: step,
            window,
            interval: 1,
            ..AugmentConfig::default()
        };
        AdaState::new(&cfg)
    }

    #[test]
    fn zero_probability_is_bitwise_identity() {
        let cfg = AugmentConfig {
            ops: all_ops(),
            ..Default::default()
        };
        let x = Tensor::from_rows(&[[1.5, -0.0], [3.25, 7.0]]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = apply(&mut g, v, &cfg, 0.0, &mut StreamRng::new(3)).unwrap();
        assert_eq!(y, v);
        let yt = apply_tensor(&x, &cfg, 0.0, &mut StreamRng::new(3));
        assert_eq!(yt.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn sign_flip_definition() {
        let cfg = AugmentConfig {
            ops: vec![AugmentOp::SignFlip],
            ..Default::default()
        };
        let x = Tensor::from_rows(&[[1.0, -2.0]]);
        let y = apply_tensor(&x, &cfg, 1.0, &mut StreamRng::new(0));
        assert_eq!(y.data(), &[-1.0, 2.0]);
    }

    #[test]
    fn same_stream_same_output() {
        let cfg = AugmentConfig {
            ops: all_ops(),
            ..Default::default()
        };
        let x = Tensor::from_rows(&[[1.0, 2.0], [0.5, -0.5], [3.0, 0.0]]);
        let a = apply_tensor(&x, &cfg, 0.7, &mut StreamRng::new(42));
        let b = apply_tensor(&x, &cfg, 0.7, &mut StreamRng::new(42));
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn gradient_with_frozen_draws() {
        let draws = draws_from_streams(&all_ops(), 0.8, 2, 17, &[0, 1, 2, 3]);
        let x = Tensor::from_rows(&[[0.1, 0.2], [-1.0, 0.4], [2.0, 2.0], [0.3, -0.9]]);
        let probe = Tensor::from_rows(&[[1.0, -2.0], [0.5, 0.5], [3.0, 1.0], [-1.0, 0.2]]);
        let err = grad_check(
            |g, v| {
                let y = apply_draws(g, v, &draws)?;
                let y2 = g.square(y)?;
                let p = g.constant(probe.clone());
                let s = g.mul(y2, p)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rotation_preserves_norm() {
        let ops = [AugmentOp::Rotation { max_deg: 180.0 }];
        let x = Tensor::from_rows(&[[3.0, 4.0]]);
        for id in 0..20 {
            let d = draws_from_streams(&ops, 1.0, 2, 1, &[id]);
            let y = d.apply(&x);
            assert!((y.norm() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn controller_rule() {
        let mut s = controller(0.6, 0.01, 0.5, 4);
        s.update(&Tensor::matrix(3, 1, vec![1.0, 2.0, 0.5]));
        assert!((s.p - 0.51).abs() < 1e-15);

        // window mean exactly at target: one positive, one zero logit → 0.5
        let mut s = controller(0.5, 0.01, 0.3, 1);
        s.update(&Tensor::matrix(2, 1, vec![1.0, 0.0]));
        assert_eq!(s.p, 0.3);
    }

    #[test]
    fn controller_interval_gates_updates() {
        let cfg = AugmentConfig {
            p: 0.2,
            interval: 4,
            ..Default::default()
        };
        let mut s = AdaState::new(&cfg);
        let pos = Tensor::matrix(1, 1, vec![1.0]);
        for _ in 0..3 {
            s.update(&pos);
            assert_eq!(s.p, 0.2);
        }
        s.update(&pos);
        assert!((s.p - 0.21).abs() < 1e-15);
    }

    #[test]
    fn controller_alternating_batches_oscillate() {
        let start = 0.4;
        let mut s = controller(0.6, 0.01, start, 1);
        let pos = Tensor::matrix(2, 1, vec![1.0, 1.0]);
        let neg = Tensor::matrix(2, 1, vec![-1.0, -1.0]);
        for i in 0..100 {
            s.update(if i % 2 == 0 { &pos } else { &neg });
            assert!((s.p - start).abs() <= 0.01 + 1e-12);
            if i % 2 == 1 {
                assert!((s.p - start).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn controller_stays_in_bounds(logits in prop::collection::vec(-5.0f64..5.0, 1..200), p0 in 0.0f64..0.8) {
            let mut s = controller(0.6, 0.05, p0, 3);
            for l in logits {
                s.update(&Tensor::matrix(1, 1, vec![l]));
                prop_assert!(s.p >= 0.0 && s.p <= s.p_max);
            }
        }

        #[test]
        fn permuting_rows_and_streams_permutes_output(seed in any::<u64>(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let ops = all_ops();
            let x = Tensor::from_rows(&[[0.1, 0.2], [1.0, -1.0], [2.5, 0.3], [-0.4, 0.9], [0.0, 1.0]]);
            let ids: Vec<u64> = (0..5).collect();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut substream(perm_seed, 0));
            let y = draws_from_streams(&ops, 0.6, 2, seed, &ids).apply(&x);
            let pids: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
            let py = draws_from_streams(&ops, 0.6, 2, seed, &pids).apply(&x.gather_rows(&perm));
            prop_assert_eq!(py, y.gather_rows(&perm));
        }
    }
}

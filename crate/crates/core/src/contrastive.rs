//! Instance discrimination: InfoNCE, feature queues, latent perturbation and
//! the three instance objectives (real instances and fake instances for the
//! discriminator, fake instances for the generator).
//!
//! Queries always come from the online discriminator and keys from the
//! momentum encoder; keys never carry gradient unless the generator's dual
//! path is switched on. Negatives are snapshots of a [`FeatureQueue`].
//!
//! The objectives return the keys they produced instead of pushing them, so
//! the trainer can push after the momentum update.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_draws, sample_draws, AugmentConfig};
use crate::graph::{Graph, GraphError, RowAffine, Var};
use crate::nets::{BoundDisc, BoundNet, DiscriminatorBundle, Head, NetworkParams};
use crate::rng::{normal_vec, StreamRng};
use crate::tensor::Tensor;

/// Tolerance on stored key norms.
pub const QUEUE_NORM_TOL: f64 = 1e-9;
/// Tolerance on InfoNCE operand norms in strict mode.
pub const NCE_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContrastiveError {
    #[error("InfoNCE needs at least one negative")]
    NoNegatives,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("{what}: row {row} has norm {norm}, expected 1")]
    NotUnit { what: &'static str, row: usize, norm: f64 },
    #[error("key width {got} does not match queue width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Standard deviation of the latent perturbation for fake positives.
    pub sigma_eps: f64,
    /// Real-key queue capacity; `None` sizes it at `queue_fraction` of the
    /// training set.
    pub queue_real: Option<usize>,
    /// Fake-key queue capacity; `None` matches the real queue.
    pub queue_fake: Option<usize>,
    pub queue_fraction: f64,
    /// Contrastive terms are skipped until a queue holds this fraction of its
    /// capacity.
    pub warmup_fraction: f64,
    /// Momentum-encoder moving-average weight.
    pub momentum: f64,
    /// Let the generator's positive key back-propagate into the generator too.
    pub dual_path_key: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 2.0,
            sigma_eps: 0.1,
            queue_real: None,
            queue_fake: None,
            queue_fraction: 0.05,
            warmup_fraction: 0.25,
            momentum: 0.999,
            dual_path_key: false,
        }
    }
}

impl ContrastiveConfig {
    /// Queue capacities `(real, fake)` for a training set of `dataset_len`.
    pub fn queue_sizes(&self, dataset_len: usize) -> (usize, usize) {
        let real = self
            .queue_real
            .unwrap_or_else(|| ((dataset_len as f64 * self.queue_fraction).round() as usize).max(1));
        (real, self.queue_fake.unwrap_or(real))
    }
}

/// Fixed-capacity FIFO of unit-norm keys.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue capacity and width must be positive");
        FeatureQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether the fill has reached `fraction` of capacity.
    pub fn is_warm(&self, fraction: f64) -> bool {
        !self.is_empty() && self.len() as f64 >= fraction * self.capacity as f64
    }

    /// Appends every row of `keys`, evicting the oldest entries past capacity.
    /// With `check_norms`, rejects the whole push if any row is not unit-norm.
    pub fn push(&mut self, keys: &Tensor, check_norms: bool) -> Result<(), ContrastiveError> {
        if keys.cols() != self.dim {
            return Err(ContrastiveError::WidthMismatch {
                expected: self.dim,
                got: keys.cols(),
            });
        }
        if check_norms {
            check_unit_rows("queue key", keys, QUEUE_NORM_TOL)?;
        }
        for row in keys.row_iter() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(row.to_vec());
        }
        Ok(())
    }

    /// Owned copy of the contents, oldest first; `None` when empty.
    pub fn snapshot(&self) -> Option<Tensor> {
        if self.entries.is_empty() {
            return None;
        }
        let data = self.entries.iter().flatten().copied().collect();
        Some(Tensor::matrix(self.entries.len(), self.dim, data))
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Rebuilds a queue from stored rows (oldest first).
    pub fn from_rows(capacity: usize, dim: usize, rows: &[f64]) -> Self {
        let mut q = FeatureQueue::new(capacity, dim);
        for r in rows.chunks_exact(dim) {
            q.entries.push_back(r.to_vec());
        }
        while q.entries.len() > capacity {
            q.entries.pop_front();
        }
        q
    }
}

fn check_unit_rows(what: &'static str, t: &Tensor, tol: f64) -> Result<(), ContrastiveError> {
    for (row, r) in t.row_iter().enumerate() {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > tol {
            return Err(ContrastiveError::NotUnit { what, row, norm });
        }
    }
    Ok(())
}

/// Mean over the batch of
/// `−log( exp(q·k⁺/τ) / (exp(q·k⁺/τ) + Σᵢ exp(q·kᵢ/τ)) )`.
///
/// The positive sits in the denominator alongside all negatives. On a strict
/// graph every operand row must be unit-norm.
pub fn info_nce(g: &mut Graph, q: Var, k_pos: Var, negatives: Var, tau: f64) -> Result<Var, ContrastiveError> {
    if !(tau > 0.0) {
        return Err(ContrastiveError::BadTemperature(tau));
    }
    if g.value(negatives).numel() == 0 || g.shape(negatives).len() != 2 {
        return Err(ContrastiveError::NoNegatives);
    }
    if g.is_strict() {
        check_unit_rows("query", g.value(q), NCE_NORM_TOL)?;
        check_unit_rows("positive key", g.value(k_pos), NCE_NORM_TOL)?;
        check_unit_rows("negative key", g.value(negatives), NCE_NORM_TOL)?;
    }
    let inv_tau = 1.0 / tau;
    let pos = g.dot_rows(q, k_pos)?;
    let pos = g.scale(pos, inv_tau)?;
    let neg_t = g.transpose(negatives)?;
    let neg = g.matmul(q, neg_t)?;
    let neg = g.scale(neg, inv_tau)?;
    let logits = g.concat_cols(pos, neg)?;
    let lse = g.logsumexp_rows(logits)?;
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean(per_row)?)
}

/// InfoNCE against a queue snapshot, or `None` while the queue is warming up.
pub fn queue_loss(
    g: &mut Graph,
    q: Var,
    keys: Var,
    queue: &FeatureQueue,
    cfg: &ContrastiveConfig,
) -> Result<Option<Var>, ContrastiveError> {
    if !queue.is_warm(cfg.warmup_fraction) {
        return Ok(None);
    }
    let negatives = g.constant(queue.snapshot().expect("warm queue is non-empty"));
    info_nce(g, q, keys, negatives, cfg.tau).map(Some)
}

/// `z + ε`, `ε ~ N(0, σ²I)` per coordinate.
pub fn perturb_latent<R: Rng>(z: &Tensor, sigma_eps: f64, rng: &mut R) -> Tensor {
    if sigma_eps == 0.0 {
        return z.clone();
    }
    let noise = normal_vec(rng, z.numel());
    let data = z.data().iter().zip(noise).map(|(x, n)| x + sigma_eps * n).collect();
    Tensor::new(z.shape().to_vec(), data).unwrap()
}

/// Result of an instance objective: the loss (absent during queue warmup) and
/// the momentum keys to push once the step's updates are done.
#[derive(Debug)]
pub struct InstanceTerm {
    pub loss: Option<Var>,
    pub keys: Tensor,
}

/// Views and randomness shared by the instance objectives.
pub struct ViewSpec<'a> {
    pub augment: &'a AugmentConfig,
    /// Current augmentation probability.
    pub p: f64,
}

/// Momentum-encoder real-head keys of the key view of `real`.
pub fn real_keys(momentum: &DiscriminatorBundle, real: &Tensor, key_draws: &RowAffine) -> Tensor {
    momentum.forward(&key_draws.apply(real), Head::Real)
}

/// How the positive key of a fake query is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FakeKey {
    /// From `G(z + ε)`.
    Perturbed,
    /// From `G(z)`, i.e. no latent perturbation.
    Vanilla,
}

/// Momentum-encoder fake-head keys for the latents `z`, whose unperturbed
/// images are `fakes`. The perturbation is drawn from `eps_rng`.
#[allow(clippy::too_many_arguments)]
pub fn fake_keys<R: Rng>(
    momentum: &DiscriminatorBundle,
    generator: &NetworkParams,
    z: &Tensor,
    fakes: &Tensor,
    key_draws: &RowAffine,
    sigma_eps: f64,
    key_kind: FakeKey,
    eps_rng: &mut R,
) -> Tensor {
    let src = if key_kind == FakeKey::Vanilla || sigma_eps == 0.0 {
        fakes.clone()
    } else {
        generator.forward(&perturb_latent(z, sigma_eps, eps_rng))
    };
    momentum.forward(&key_draws.apply(&src), Head::Fake)
}

/// InfoNCE of the queries `q` against constant `keys` and a queue snapshot.
pub fn instance_term(
    g: &mut Graph,
    q: Var,
    keys: Tensor,
    queue: &FeatureQueue,
    cfg: &ContrastiveConfig,
) -> Result<InstanceTerm, ContrastiveError> {
    let kv = g.constant(keys.clone());
    let loss = queue_loss(g, q, kv, queue, cfg)?;
    Ok(InstanceTerm { loss, keys })
}

/// Instance discrimination on real samples.
///
/// Queries are the online real head on one augmented view; keys are the
/// momentum encoder's real head on an independently augmented view.
#[allow(clippy::too_many_arguments)]
pub fn real_instance_loss(
    g: &mut Graph,
    online: &BoundDisc,
    momentum: &DiscriminatorBundle,
    real: &Tensor,
    queue: &FeatureQueue,
    cfg: &ContrastiveConfig,
    views: &ViewSpec<'_>,
    rng: &mut StreamRng,
) -> Result<InstanceTerm, ContrastiveError> {
    let (b, d) = (real.rows(), real.cols());
    let draws_q = sample_draws(&views.augment.ops, views.p, b, d, rng);
    let draws_k = sample_draws(&views.augment.ops, views.p, b, d, rng);
    let x = g.constant(real.clone());
    let xq = apply_draws(g, x, &draws_q)?;
    let q = online.forward(g, xq, Head::Real)?;
    instance_term(g, q, real_keys(momentum, real, &draws_k), queue, cfg)
}

/// Randomness consumed by the fake-instance objectives, in a fixed order so
/// that the discriminator and generator variants see identical draws.
pub struct FakeDraws {
    pub query: RowAffine,
    pub key: RowAffine,
    /// Sub-stream id of the latent perturbation.
    pub eps: u64,
}

impl FakeDraws {
    pub fn sample(b: usize, d: usize, views: &ViewSpec<'_>, rng: &mut StreamRng) -> Self {
        let query = sample_draws(&views.augment.ops, views.p, b, d, rng);
        let key = sample_draws(&views.augment.ops, views.p, b, d, rng);
        let eps = rng.reserve(1);
        FakeDraws { query, key, eps }
    }
}

/// Instance discrimination on synthesized samples, for the discriminator.
///
/// Generator outputs are plain tensors here, so the generator receives no
/// gradient from this loss.
#[allow(clippy::too_many_arguments)]
pub fn fake_instance_loss_d(
    g: &mut Graph,
    online: &BoundDisc,
    momentum: &DiscriminatorBundle,
    generator: &NetworkParams,
    z: &Tensor,
    queue: &FeatureQueue,
    cfg: &ContrastiveConfig,
    views: &ViewSpec<'_>,
    key_kind: FakeKey,
    rng: &mut StreamRng,
) -> Result<InstanceTerm, ContrastiveError> {
    let fakes = generator.forward(z);
    let draws = FakeDraws::sample(fakes.rows(), fakes.cols(), views, rng);
    let x = g.constant(fakes.clone());
    let xq = apply_draws(g, x, &draws.query)?;
    let q = online.forward(g, xq, Head::Fake)?;
    let keys = fake_keys(
        momentum,
        generator,
        z,
        &fakes,
        &draws.key,
        cfg.sigma_eps,
        key_kind,
        &mut rng.substream(draws.eps),
    );
    instance_term(g, q, keys, queue, cfg)
}

/// The generator's instance objective: the fake-instance loss with an
/// unperturbed positive, differentiated through the generator.
///
/// `generator` must be bound on `g`; `online` is normally bound as
/// constants. The generator step does not push the returned keys.
#[allow(clippy::too_many_arguments)]
pub fn fake_instance_loss_g(
    g: &mut Graph,
    online: &BoundDisc,
    momentum: &DiscriminatorBundle,
    generator: &BoundNet,
    z: &Tensor,
    queue: &FeatureQueue,
    cfg: &ContrastiveConfig,
    views: &ViewSpec<'_>,
    rng: &mut StreamRng,
) -> Result<InstanceTerm, ContrastiveError> {
    let zv = g.constant(z.clone());
    let fakes = generator.forward(g, zv)?;
    let (b, d) = (g.value(fakes).rows(), g.value(fakes).cols());
    let draws = FakeDraws::sample(b, d, views, rng);
    let xq = apply_draws(g, fakes, &draws.query)?;
    let q = online.forward(g, xq, Head::Fake)?;
    generator_term(g, q, fakes, &draws.key, momentum, queue, cfg)
}

/// Shared tail of the generator objective: keys from the key view of `fakes`
/// through the momentum encoder, then InfoNCE against the fake queue.
pub fn generator_term(
    g: &mut Graph,
    q: Var,
    fakes: Var,
    key_draws: &RowAffine,
    momentum: &DiscriminatorBundle,
    queue: &FeatureQueue,
    cfg: &ContrastiveConfig,
) -> Result<InstanceTerm, ContrastiveError> {
    if cfg.dual_path_key {
        let bm = momentum.bind_as(g, false);
        let xk = apply_draws(g, fakes, key_draws)?;
        let kv = bm.forward(g, xk, Head::Fake)?;
        let keys = g.value(kv).clone();
        let loss = queue_loss(g, q, kv, queue, cfg)?;
        return Ok(InstanceTerm { loss, keys });
    }
    let keys = momentum.forward(&key_draws.apply(g.value(fakes)), Head::Fake);
    instance_term(g, q, keys, queue, cfg)
}

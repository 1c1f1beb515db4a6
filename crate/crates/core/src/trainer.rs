//! Alternating discriminator and generator updates with momentum encoders,
//! feature queues, adaptive augmentation and generator EMA.
//!
//! One training step is `d_steps_per_g` discriminator steps followed by one
//! generator step. Randomness is drawn from numbered sub-streams in a fixed
//! layout that does not depend on the loss weights, so runs with different
//! presets but the same seed see the same batches, latents and views.

use rand::Rng;

use crate::augment::{apply_draws, draws_from_streams, AdaState};
use crate::config::{Data, RunConfig};
use crate::datasets::Dataset;
use crate::contrastive::{
    fake_keys, generator_term, instance_term, real_keys, ContrastiveError, FakeKey, FeatureQueue,
};
use crate::graph::{Graph, GraphError, RowAffine};
use crate::losses::{
    d_logistic_loss, g_nonsat_loss, r1_from_input_grad, total_d_loss, total_g_loss, DParts, GParts,
};
use crate::metrics::{fit_gaussian, frechet_distance, mode_coverage, GaussianFit, MetricError};
use crate::nets::{
    build_discriminator, build_generator, momentum_update, moving_average, DiscriminatorBundle, Head, NetError,
    NetworkParams,
};
use crate::optim::Adam;
use crate::rng::{normal_vec, StreamRng};
use crate::tensor::Tensor;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite {phase} loss at step {step}: {dump}")]
    NonFinite { step: u64, phase: &'static str, dump: String },
    #[error("{0}")]
    Observer(String),
}

/// Running sums since the last evaluation, one slot per logged quantity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accumulators {
    pub sums: [f64; Accumulators::SLOTS],
    pub counts: [u64; Accumulators::SLOTS],
}

impl Accumulators {
    pub const SLOTS: usize = 8;
    pub const L_D: usize = 0;
    pub const C_R_D: usize = 1;
    pub const C_F_D: usize = 2;
    pub const R1: usize = 3;
    pub const L_G: usize = 4;
    pub const C_F_G: usize = 5;
    pub const REAL_LOGIT: usize = 6;
    pub const FAKE_LOGIT: usize = 7;

    fn add(&mut self, slot: usize, v: Option<f64>) {
        if let Some(v) = v {
            self.sums[slot] += v;
            self.counts[slot] += 1;
        }
    }

    fn mean(&self, slot: usize) -> Option<f64> {
        (self.counts[slot] > 0).then(|| self.sums[slot] / self.counts[slot] as f64)
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub d_steps: u64,
    pub disc: DiscriminatorBundle,
    pub disc_m: DiscriminatorBundle,
    pub gen: NetworkParams,
    pub gen_ema: NetworkParams,
    pub adam_d: Adam,
    pub adam_g: Adam,
    pub ada: AdaState,
    pub queue_real: FeatureQueue,
    pub queue_fake: FeatureQueue,
    pub rng: StreamRng,
    pub acc: Accumulators,
}

impl TrainState {
    /// Fresh state for `cfg` on a training set of `train_len` samples of
    /// width `dim`.
    pub fn new(cfg: &RunConfig, train_len: usize, dim: usize) -> Result<Self, TrainError> {
        let m = &cfg.model;
        let t = &cfg.trainer;
        let disc = build_discriminator(dim, &m.d_hidden, m.feat_dim, m.proj_dim, t.seed)?;
        let mut disc_m = disc.momentum_copy();
        for n in disc_m.nets_mut() {
            n.trainable = false;
        }
        let gen = build_generator(m.latent_dim, &m.g_hidden, dim, t.seed)?;
        let gen_ema = gen.frozen_copy();
        let (qr, qf) = cfg.contrastive.queue_sizes(train_len);
        Ok(TrainState {
            step: 0,
            d_steps: 0,
            adam_d: Adam::new(t.adam_d(), disc.tensors()),
            adam_g: Adam::new(t.adam_g(), gen.tensors()),
            disc,
            disc_m,
            gen,
            gen_ema,
            ada: AdaState::new(&cfg.augment),
            queue_real: FeatureQueue::new(qr, m.proj_dim),
            queue_fake: FeatureQueue::new(qf, m.proj_dim),
            rng: StreamRng::new(t.seed).derive(TRAIN_STREAM),
            acc: Accumulators::default(),
        })
    }
}

/// Scalar values of one discriminator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DStepRecord {
    pub l_d: f64,
    pub c_r_d: Option<f64>,
    pub c_f_d: Option<f64>,
    pub r1: Option<f64>,
    pub total: f64,
    pub mean_real_logit: f64,
    pub mean_fake_logit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GStepRecord {
    pub l_g: f64,
    pub c_f_g: Option<f64>,
    pub total: f64,
}

/// One row of the metrics log; means are over the steps since the previous
/// row, and `None` means the quantity was not computed in that window.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub step: u64,
    pub l_d: Option<f64>,
    pub c_r_d: Option<f64>,
    pub c_f_d: Option<f64>,
    pub r1: Option<f64>,
    pub l_g: Option<f64>,
    pub c_f_g: Option<f64>,
    pub mean_real_logit: Option<f64>,
    pub mean_fake_logit: Option<f64>,
    pub aug_p: f64,
    pub frechet: f64,
    pub mode_coverage: Option<usize>,
    pub hq_fraction: Option<f64>,
}

impl RunRecord {
    pub const COLUMNS: [&'static str; 13] = [
        "step",
        "l_d",
        "c_r_d",
        "c_f_d",
        "r1",
        "l_g",
        "c_f_g",
        "mean_real_logit",
        "mean_fake_logit",
        "aug_p",
        "frechet",
        "mode_coverage",
        "hq_fraction",
    ];

    /// CSV cells in [`COLUMNS`](Self::COLUMNS) order; absent values are
    /// empty. Floats use shortest round-trip formatting.
    pub fn cells(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        vec![
            self.step.to_string(),
            f(self.l_d),
            f(self.c_r_d),
            f(self.c_f_d),
            f(self.r1),
            f(self.l_g),
            f(self.c_f_g),
            f(self.mean_real_logit),
            f(self.mean_fake_logit),
            f(Some(self.aug_p)),
            f(Some(self.frechet)),
            self.mode_coverage.map(|c| c.to_string()).unwrap_or_default(),
            f(self.hq_fraction),
        ]
    }

    /// Loss parts present in this record.
    pub fn losses(&self) -> impl Iterator<Item = (&'static str, f64)> {
        [
            ("l_d", self.l_d),
            ("c_r_d", self.c_r_d),
            ("c_f_d", self.c_f_d),
            ("r1", self.r1),
            ("l_g", self.l_g),
            ("c_f_g", self.c_f_g),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
    }
}

fn new_graph(cfg: &RunConfig) -> Graph {
    if cfg.trainer.strict {
        Graph::strict()
    } else {
        Graph::new()
    }
}

fn reserve_ids(rng: &mut StreamRng, n: usize) -> Vec<u64> {
    let base = rng.reserve(n as u64);
    (base..base + n as u64).collect()
}

fn draws(cfg: &RunConfig, p: f64, dim: usize, seed: u64, ids: &[u64]) -> RowAffine {
    draws_from_streams(&cfg.augment.ops, p, dim, seed, ids)
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

/// One discriminator update on `real` and the fakes of latents `z`.
///
/// The generator runs outside the graph, so it gets no gradient. Order after
/// the backward pass: Adam on the online discriminator, momentum update, queue
/// pushes, then the augmentation controller.
pub fn d_step(state: &mut TrainState, cfg: &RunConfig, real: &Tensor, z: &Tensor) -> Result<DStepRecord, TrainError> {
    let w = &cfg.loss;
    let c = &cfg.contrastive;
    let p = state.ada.p;
    let (b, dim) = (real.rows(), real.cols());
    let bf = z.rows();
    let seed = state.rng.seed();
    let query_r = reserve_ids(&mut state.rng, b);
    let query_f = reserve_ids(&mut state.rng, bf);
    let key_r = reserve_ids(&mut state.rng, b);
    let key_f = reserve_ids(&mut state.rng, bf);
    let eps_id = state.rng.reserve(1);

    let fakes = state.gen.forward(z);
    let mut g = new_graph(cfg);
    let bd = state.disc.bind_as(&mut g, true);
    let xr = g.constant(real.clone());
    let xr = apply_draws(&mut g, xr, &draws(cfg, p, dim, seed, &query_r))?;
    let xf = g.constant(fakes.clone());
    let xf = apply_draws(&mut g, xf, &draws(cfg, p, dim, seed, &query_f))?;

    let tr = bd.domain_traced(&mut g, xr)?;
    let real_feats = tr.features;
    let fake_feats = bd.features(&mut g, xf)?;
    let fake_logits = bd.head_forward(&mut g, fake_feats, Head::Domain)?;
    let mut parts = DParts {
        l_d: Some(d_logistic_loss(&mut g, tr.logits, fake_logits)?),
        ..Default::default()
    };
    if w.r1_gamma > 0.0 && state.d_steps % w.r1_interval as u64 == 0 {
        let grad = tr.input_gradient(&mut g)?;
        parts.r1 = Some(r1_from_input_grad(&mut g, grad, w.r1_gamma * w.r1_interval as f64)?);
    }

    let mut push_real = None;
    if w.lambda_r_d > 0.0 {
        let keys = real_keys(&state.disc_m, real, &draws(cfg, p, dim, seed, &key_r));
        let q = bd.head_forward(&mut g, real_feats, Head::Real)?;
        let term = instance_term(&mut g, q, keys, &state.queue_real, c)?;
        parts.c_r_d = term.loss;
        push_real = Some(term.keys);
    }
    let mut push_fake = None;
    if w.lambda_f_d > 0.0 || w.lambda_g > 0.0 {
        let keys = fake_keys(
            &state.disc_m,
            &state.gen,
            z,
            &fakes,
            &draws(cfg, p, dim, seed, &key_f),
            c.sigma_eps,
            FakeKey::Perturbed,
            &mut state.rng.substream(eps_id),
        );
        if w.lambda_f_d > 0.0 {
            let q = bd.head_forward(&mut g, fake_feats, Head::Fake)?;
            let term = instance_term(&mut g, q, keys, &state.queue_fake, c)?;
            parts.c_f_d = term.loss;
            push_fake = Some(term.keys);
        } else {
            push_fake = Some(keys);
        }
    }

    let total = total_d_loss(&mut g, &parts, w)?;
    let val = |v: Option<_>| v.map(|v| g.value(v).item());
    let rec = DStepRecord {
        l_d: val(parts.l_d).unwrap(),
        c_r_d: val(parts.c_r_d),
        c_f_d: val(parts.c_f_d),
        r1: val(parts.r1),
        total: g.value(total).item(),
        mean_real_logit: g.value(tr.logits).mean(),
        mean_fake_logit: g.value(fake_logits).mean(),
    };
    g.backward(total)?;
    let grads = bd.grads(&g);
    if !rec.total.is_finite() || !all_finite(&grads) {
        return Err(TrainError::NonFinite {
            step: state.step,
            phase: "discriminator",
            dump: format!("{rec:?}"),
        });
    }
    let real_logits = g.value(tr.logits).clone();
    drop(g);

    state.adam_d.step(state.disc.tensors_mut(), &grads);
    momentum_update(&state.disc, &mut state.disc_m, c.momentum)?;
    let strict = cfg.trainer.strict;
    if let Some(k) = push_real {
        state.queue_real.push(&k, strict)?;
    }
    if let Some(k) = push_fake {
        state.queue_fake.push(&k, strict)?;
    }
    if cfg.augment.adaptive {
        state.ada.update(&real_logits);
    }
    state.d_steps += 1;
    Ok(rec)
}

/// One generator update with the discriminator frozen, followed by the EMA
/// update of the generator copy used for evaluation.
pub fn g_step(state: &mut TrainState, cfg: &RunConfig, z: &Tensor) -> Result<GStepRecord, TrainError> {
    let w = &cfg.loss;
    let p = state.ada.p;
    let b = z.rows();
    let dim = state.gen.out_dim();
    let seed = state.rng.seed();
    let query = reserve_ids(&mut state.rng, b);
    let key = reserve_ids(&mut state.rng, b);

    let mut g = new_graph(cfg);
    let bg = state.gen.bind_as(&mut g, true);
    let bd = state.disc.bind_as(&mut g, false);
    let zv = g.constant(z.clone());
    let fakes = bg.forward(&mut g, zv)?;
    let xq = apply_draws(&mut g, fakes, &draws(cfg, p, dim, seed, &query))?;
    let feats = bd.features(&mut g, xq)?;
    let logits = bd.head_forward(&mut g, feats, Head::Domain)?;
    let mut parts = GParts {
        l_g: Some(g_nonsat_loss(&mut g, logits)?),
        c_f_g: None,
    };
    if w.lambda_g > 0.0 {
        let q = bd.head_forward(&mut g, feats, Head::Fake)?;
        let key_draws = draws(cfg, p, dim, seed, &key);
        parts.c_f_g = generator_term(&mut g, q, fakes, &key_draws, &state.disc_m, &state.queue_fake, &cfg.contrastive)?.loss;
    }
    let total = total_g_loss(&mut g, &parts, w)?;
    let rec = GStepRecord {
        l_g: g.value(parts.l_g.unwrap()).item(),
        c_f_g: parts.c_f_g.map(|v| g.value(v).item()),
        total: g.value(total).item(),
    };
    g.backward(total)?;
    let grads = bg.grads(&g);
    if !rec.total.is_finite() || !all_finite(&grads) {
        return Err(TrainError::NonFinite {
            step: state.step,
            phase: "generator",
            dump: format!("{rec:?}"),
        });
    }
    drop(g);
    state.adam_g.step(state.gen.tensors_mut(), &grads);
    moving_average(&mut state.gen_ema, &state.gen, cfg.trainer.ema_decay)?;
    Ok(rec)
}

pub fn latents<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Tensor {
    Tensor::matrix(rows, dim, normal_vec(rng, rows * dim))
}

/// One full training step: the discriminator step(s), then the generator
/// step. Updates the accumulators and advances `state.step`.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, train: &Tensor) -> Result<(), TrainError> {
    let b = cfg.trainer.batch;
    let latent = cfg.model.latent_dim;
    for _ in 0..cfg.trainer.d_steps_per_g {
        let mut s = state.rng.stream();
        let idx: Vec<usize> = (0..b).map(|_| s.random_range(0..train.rows())).collect();
        let real = train.gather_rows(&idx);
        let z = latents(&mut s, b, latent);
        let r = d_step(state, cfg, &real, &z)?;
        let acc = &mut state.acc;
        acc.add(Accumulators::L_D, Some(r.l_d));
        acc.add(Accumulators::C_R_D, r.c_r_d);
        acc.add(Accumulators::C_F_D, r.c_f_d);
        acc.add(Accumulators::R1, r.r1);
        acc.add(Accumulators::REAL_LOGIT, Some(r.mean_real_logit));
        acc.add(Accumulators::FAKE_LOGIT, Some(r.mean_fake_logit));
    }
    let z = latents(&mut state.rng.stream(), b, latent);
    let r = g_step(state, cfg, &z)?;
    state.acc.add(Accumulators::L_G, Some(r.l_g));
    state.acc.add(Accumulators::C_F_G, r.c_f_g);
    state.step += 1;
    Ok(())
}

/// Sample quality metrics of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub frechet: f64,
    pub mode_coverage: Option<usize>,
    pub hq_fraction: Option<f64>,
}

/// Evaluates generator snapshots against a fixed reference set.
#[derive(Clone, Debug)]
pub struct Evaluator {
    reference: GaussianFit,
    centers: Option<Vec<Vec<f64>>>,
    sigma: Option<f64>,
    hq_mult: f64,
    samples: usize,
    latent_dim: usize,
    rng: StreamRng,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig, data: &Data) -> Result<Self, TrainError> {
        Self::for_reference(cfg, &data.reference, cfg.eval.samples)
    }

    /// Evaluator against an arbitrary reference set drawing `samples`
    /// generator samples per evaluation.
    pub fn for_reference(cfg: &RunConfig, reference: &Dataset, samples: usize) -> Result<Self, TrainError> {
        Ok(Evaluator {
            reference: fit_gaussian(&reference.samples)?,
            centers: reference.meta.centers.clone(),
            sigma: reference.meta.sigma,
            hq_mult: cfg.eval.hq_radius_mult,
            samples,
            latent_dim: cfg.model.latent_dim,
            rng: StreamRng::new(cfg.trainer.seed).derive(EVAL_STREAM),
        })
    }

    /// Generator samples for evaluation at `step`; the latents depend only on
    /// the seed and the step.
    pub fn sample(&self, gen: &NetworkParams, step: u64) -> Tensor {
        let mut r = self.rng.derive(step).stream();
        gen.forward(&latents(&mut r, self.samples, self.latent_dim))
    }

    pub fn evaluate(&self, gen: &NetworkParams, step: u64) -> Result<EvalMetrics, TrainError> {
        self.metrics(&self.sample(gen, step))
    }

    pub fn metrics(&self, fakes: &Tensor) -> Result<EvalMetrics, TrainError> {
        let frechet = frechet_distance(&fit_gaussian(fakes)?, &self.reference)?;
        let cov = match (&self.centers, self.sigma) {
            (Some(c), Some(s)) => Some(mode_coverage(fakes, c, s, self.hq_mult)),
            _ => None,
        };
        Ok(EvalMetrics {
            frechet,
            mode_coverage: cov.as_ref().map(|c| c.covered),
            hq_fraction: cov.map(|c| c.hq_fraction),
        })
    }
}

/// Receives metrics rows and checkpoints as a run progresses.
pub trait RunObserver {
    fn on_record(&mut self, _record: &RunRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Collects records in memory.
#[derive(Default)]
pub struct Collect {
    pub records: Vec<RunRecord>,
}

impl RunObserver for Collect {
    fn on_record(&mut self, record: &RunRecord) -> Result<(), TrainError> {
        self.records.push(record.clone());
        Ok(())
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub data: Data,
    pub state: TrainState,
    evaluator: Evaluator,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: Data) -> Result<Self, TrainError> {
        let state = TrainState::new(&cfg, data.train.len(), data.train.dim())?;
        Self::resume(cfg, data, state)
    }

    /// Continues from a saved state.
    pub fn resume(cfg: RunConfig, data: Data, state: TrainState) -> Result<Self, TrainError> {
        let evaluator = Evaluator::new(&cfg, &data)?;
        Ok(Trainer {
            cfg,
            data,
            state,
            evaluator,
        })
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    fn record(&mut self) -> Result<RunRecord, TrainError> {
        let m = self.evaluator.evaluate(&self.state.gen_ema, self.state.step)?;
        let a = std::mem::take(&mut self.state.acc);
        Ok(RunRecord {
            step: self.state.step,
            l_d: a.mean(Accumulators::L_D),
            c_r_d: a.mean(Accumulators::C_R_D),
            c_f_d: a.mean(Accumulators::C_F_D),
            r1: a.mean(Accumulators::R1),
            l_g: a.mean(Accumulators::L_G),
            c_f_g: a.mean(Accumulators::C_F_G),
            mean_real_logit: a.mean(Accumulators::REAL_LOGIT),
            mean_fake_logit: a.mean(Accumulators::FAKE_LOGIT),
            aug_p: self.state.ada.p,
            frechet: m.frechet,
            mode_coverage: m.mode_coverage,
            hq_fraction: m.hq_fraction,
        })
    }

    /// Trains until `cfg.trainer.steps`, evaluating every `eval_every` steps
    /// and at the last step, and checkpointing every `ckpt_every` steps and at
    /// the last step. With nothing left to do, emits one checkpoint of the
    /// current state.
    pub fn run(&mut self, obs: &mut dyn RunObserver) -> Result<(), TrainError> {
        let t = self.cfg.trainer.clone();
        if self.state.step >= t.steps {
            return obs.on_checkpoint(&self.state);
        }
        let train = self.data.train.samples.clone();
        while self.state.step < t.steps {
            train_step(&mut self.state, &self.cfg, &train)?;
            let s = self.state.step;
            let last = s == t.steps;
            if s % t.eval_every == 0 || last {
                let rec = self.record()?;
                log::info!(
                    "step {s}: frechet {:.4} coverage {:?} p {:.3}",
                    rec.frechet,
                    rec.mode_coverage,
                    rec.aug_p
                );
                obs.on_record(&rec)?;
            }
            if (t.ckpt_every > 0 && s % t.ckpt_every == 0) || last {
                obs.on_checkpoint(&self.state)?;
            }
        }
        Ok(())
    }
}

//! Run configuration: a JSON document with sections `dataset`, `model`,
//! `loss`, `contrastive`, `augment`, `trainer` and `eval`.
//!
//! Every field is optional and unknown keys are rejected. Overrides are
//! applied to the parsed JSON before it is deserialized, in this order: the
//! file, then `INSGEN_<SECTION>_<KEY>` environment variables, then explicit
//! `section.key=value` pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::contrastive::ContrastiveConfig;
use crate::datasets::{self, DataError, Dataset};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid JSON: {0}")]
    Syntax(String),
    #[error("{path}: {msg}")]
    Field { path: String, msg: String },
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
}

impl ConfigError {
    fn field(path: &str, msg: impl Into<String>) -> Self {
        ConfigError::Field {
            path: path.to_string(),
            msg: msg.into(),
        }
    }

    /// Dotted path of the offending field, when the error concerns one.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Ring,
    Grid,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Table to load when `kind` is `csv`.
    pub path: Option<String>,
    pub modes: usize,
    pub radius: f64,
    pub side: usize,
    pub spacing: f64,
    pub sigma: f64,
    /// Size of the full synthetic set the training subset is drawn from. The
    /// Fréchet reference is this full set.
    pub pool: usize,
    /// Number of unique training samples; `None` trains on the whole pool.
    pub subsample: Option<usize>,
    /// Append first-coordinate flips of the training samples.
    pub mirror: bool,
    /// Further pool samples kept aside for the memorization gap.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Ring,
            path: None,
            modes: 8,
            radius: 2.0,
            side: 5,
            spacing: 1.0,
            sigma: 0.05,
            pool: 10_000,
            subsample: Some(256),
            mirror: true,
            holdout: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub feat_dim: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 2,
            g_hidden: vec![64, 64, 64],
            d_hidden: vec![64, 64, 64],
            feat_dim: 64,
            proj_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub d_steps_per_g: usize,
    pub eval_every: u64,
    /// 0 disables periodic checkpoints; the final state is always saved.
    pub ckpt_every: u64,
    /// Reject non-finite values inside every graph op.
    pub strict: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 20_000,
            batch: 64,
            lr_d: 2.5e-3,
            lr_g: 2.5e-3,
            adam_betas: [0.0, 0.99],
            adam_eps: 1e-8,
            ema_decay: 0.999,
            seed: 0,
            d_steps_per_g: 1,
            eval_every: 500,
            ckpt_every: 5000,
            strict: false,
        }
    }
}

impl TrainerConfig {
    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_d,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
        }
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_g,
            ..self.adam_d()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub hq_radius_mult: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 10000,
            hq_radius_mult: 3.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

/// Training data together with the evaluation references.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    /// Reference set for the Fréchet distance.
    pub reference: Dataset,
    pub holdout: Option<Dataset>,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Field {
                path,
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies environment and explicit overrides.
    pub fn load(path: &Path, env: &[(String, String)], overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        apply_env(&mut v, env)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First eight bytes of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.kind == DatasetKind::Csv && d.path.is_none() {
            return Err(ConfigError::field("dataset.path", "required when dataset.kind is \"csv\""));
        }
        if !(d.sigma >= 0.0) {
            return Err(ConfigError::field("dataset.sigma", "must be non-negative"));
        }
        if d.subsample == Some(0) {
            return Err(ConfigError::field("dataset.subsample", "must be positive"));
        }
        let m = &self.model;
        for (name, v) in [("latent_dim", m.latent_dim), ("feat_dim", m.feat_dim), ("proj_dim", m.proj_dim)] {
            if v == 0 {
                return Err(ConfigError::field(&format!("model.{name}"), "must be positive"));
            }
        }
        if m.g_hidden.contains(&0) || m.d_hidden.contains(&0) {
            return Err(ConfigError::field("model", "hidden widths must be positive"));
        }
        self.loss.validate().map_err(|msg| ConfigError::field("loss", msg))?;
        let c = &self.contrastive;
        if !(c.tau > 0.0) {
            return Err(ConfigError::field("contrastive.tau", "must be positive"));
        }
        if !(c.sigma_eps >= 0.0) {
            return Err(ConfigError::field("contrastive.sigma_eps", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&c.momentum) {
            return Err(ConfigError::field("contrastive.momentum", "must lie in [0, 1]"));
        }
        if c.queue_real == Some(0) || c.queue_fake == Some(0) {
            return Err(ConfigError::field("contrastive", "queue capacities must be positive"));
        }
        self.augment.validate().map_err(|e| match e {
            crate::augment::AugmentError::Invalid { field, msg } => ConfigError::field(&format!("augment.{field}"), msg),
        })?;
        let t = &self.trainer;
        if t.batch == 0 {
            return Err(ConfigError::field("trainer.batch", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(ConfigError::field("trainer.ema_decay", "must lie in [0, 1)"));
        }
        if t.d_steps_per_g == 0 {
            return Err(ConfigError::field("trainer.d_steps_per_g", "must be positive"));
        }
        if t.eval_every == 0 {
            return Err(ConfigError::field("trainer.eval_every", "must be positive"));
        }
        if self.eval.samples < 2 {
            return Err(ConfigError::field("eval.samples", "must be at least 2"));
        }
        Ok(())
    }

    /// Builds the training set, the Fréchet reference and the holdout.
    pub fn build_data(&self) -> Result<Data, ConfigError> {
        let d = &self.dataset;
        let pool = match d.kind {
            DatasetKind::Ring => datasets::make_ring(d.modes, d.radius, d.sigma, d.pool, d.seed)?,
            DatasetKind::Grid => datasets::make_grid(d.side, d.spacing, d.sigma, d.pool, d.seed)?,
            DatasetKind::Csv => datasets::load_table(Path::new(d.path.as_deref().unwrap()))?,
        };
        match d.subsample {
            Some(n) => {
                let (train, holdout) = datasets::subsample_split(&pool, n, d.holdout, d.seed, d.mirror)?;
                Ok(Data {
                    train,
                    reference: pool,
                    holdout,
                })
            }
            None => {
                let train = if d.mirror {
                    datasets::subsample(&pool, pool.len(), d.seed, true)?
                } else {
                    pool.clone()
                };
                Ok(Data {
                    train,
                    reference: pool,
                    holdout: None,
                })
            }
        }
    }
}

/// Parses a value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[&str], value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        if !cur.is_object() {
            return Err(ConfigError::field(&path[..i].join("."), "is not a section"));
        }
        let map = cur.as_object_mut().unwrap();
        if i + 1 == path.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    set_path(root, &path, parse_value(raw.trim()))
}

/// Applies `INSGEN_<SECTION>_<KEY>=value` pairs; the key part is lowercased,
/// so `INSGEN_CONTRASTIVE_SIGMA_EPS` sets `contrastive.sigma_eps`.
pub fn apply_env(root: &mut Value, env: &[(String, String)]) -> Result<(), ConfigError> {
    let mut pairs: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with("INSGEN_")).collect();
    pairs.sort();
    for (k, v) in pairs {
        let rest = k["INSGEN_".len()..].to_lowercase();
        let Some((section, key)) = rest.split_once('_') else {
            return Err(ConfigError::Override(k.clone()));
        };
        set_path(root, &[section, key], parse_value(v))?;
    }
    Ok(())
}

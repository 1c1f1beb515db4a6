//! Versioned binary container for [`TrainState`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "INSGENCK" | version u32 | config hash u64 | step u64 | body length u64
//! body: section count u32, then per section
//!       name length u16 | name | kind u8 | ndim u8 | dims u64 × ndim | payload
//! sha256 of everything before it (32 bytes)
//! ```
//!
//! Section kinds are 64-bit floats, unsigned 64-bit integers, or raw bytes.
//! The run configuration is stored as JSON so a checkpoint is
//! self-describing.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::contrastive::FeatureQueue;
use crate::nets::{build_generator, DiscriminatorBundle, NetworkParams};
use crate::optim::Adam;
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::trainer::{Accumulators, TrainError, TrainState};

pub const MAGIC: &[u8; 8] = b"INSGENCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 36;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the checksum")]
    TrailingData(usize),
    #[error("checksum mismatch: checkpoint is corrupted")]
    Checksum,
    #[error("malformed section table: {0}")]
    Malformed(String),
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("section {name:?}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint was written by a run with a different configuration: {0}")]
    ConfigMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn kind(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U64(_) => 1,
            Payload::Bytes(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// A parsed checkpoint: header fields plus named sections in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub step: u64,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&Section, CheckpointError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    fn f64s(&self, name: &str, expected: Option<&[usize]>) -> Result<&[f64], CheckpointError> {
        let s = self.section(name)?;
        if let Some(e) = expected {
            if s.shape != e {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.into(),
                    expected: e.to_vec(),
                    found: s.shape.clone(),
                });
            }
        }
        match &s.payload {
            Payload::F64(v) => Ok(v),
            _ => Err(CheckpointError::Malformed(format!("{name} is not a float section"))),
        }
    }

    fn u64s(&self, name: &str, len: usize) -> Result<&[u64], CheckpointError> {
        let s = self.section(name)?;
        match &s.payload {
            Payload::U64(v) if v.len() == len => Ok(v),
            Payload::U64(v) => Err(CheckpointError::ShapeMismatch {
                name: name.into(),
                expected: vec![len],
                found: vec![v.len()],
            }),
            _ => Err(CheckpointError::Malformed(format!("{name} is not an integer section"))),
        }
    }

    /// The run configuration stored in the checkpoint.
    pub fn config(&self) -> Result<RunConfig, CheckpointError> {
        match &self.section("config")?.payload {
            Payload::Bytes(b) => {
                let text = std::str::from_utf8(b).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                RunConfig::from_json_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))
            }
            _ => Err(CheckpointError::Malformed("config is not a byte section".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            body.extend_from_slice(&(s.name.len() as u16).to_le_bytes());
            body.extend_from_slice(s.name.as_bytes());
            body.push(s.payload.kind());
            body.push(s.shape.len() as u8);
            for &d in &s.shape {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &s.payload {
                Payload::F64(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => body.extend_from_slice(v),
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a checkpoint. Nothing is returned unless the whole
    /// file checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
            return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() {
                CheckpointError::Truncated {
                    expected: HEADER_LEN + DIGEST_LEN,
                    found: bytes.len(),
                }
            } else {
                CheckpointError::BadMagic
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                expected: HEADER_LEN + DIGEST_LEN,
                found: bytes.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let body_len = u64_at(28) as usize;
        let expected = HEADER_LEN.saturating_add(body_len).saturating_add(DIGEST_LEN);
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(CheckpointError::TrailingData(bytes.len() - expected));
        }
        let signed = &bytes[..HEADER_LEN + body_len];
        if Sha256::digest(signed).as_slice() != &bytes[HEADER_LEN + body_len..] {
            return Err(CheckpointError::Checksum);
        }
        let sections = parse_body(&bytes[HEADER_LEN..HEADER_LEN + body_len])?;
        Ok(Checkpoint {
            version,
            config_hash: u64_at(12),
            step: u64_at(20),
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("section table overruns body at {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse_body(body: &[u8]) -> Result<Vec<Section>, CheckpointError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let kind = c.u8()?;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = match kind {
            0 => Payload::F64(
                c.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed(name.clone()))?)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => Payload::U64(
                c.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed(name.clone()))?)?
                    .chunks_exact(8)
                    .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            2 => Payload::Bytes(c.take(n)?.to_vec()),
            k => return Err(CheckpointError::Malformed(format!("{name}: unknown section kind {k}"))),
        };
        out.push(Section { name, shape, payload });
    }
    if c.pos != body.len() {
        return Err(CheckpointError::Malformed("bytes left over after the last section".into()));
    }
    Ok(out)
}

fn tensor_section(name: String, t: &Tensor) -> Section {
    Section {
        name,
        shape: t.shape().to_vec(),
        payload: Payload::F64(t.data().to_vec()),
    }
}

fn net_sections(prefix: &str, net: &NetworkParams, out: &mut Vec<Section>) {
    for (name, t) in net.named_tensors() {
        out.push(tensor_section(format!("{prefix}.{name}"), t));
    }
}

fn bundle_sections(prefix: &str, b: &DiscriminatorBundle, out: &mut Vec<Section>) {
    for n in b.nets() {
        net_sections(prefix, n, out);
    }
}

fn adam_sections(prefix: &str, a: &Adam, out: &mut Vec<Section>) {
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        out.push(tensor_section(format!("{prefix}.m.{i}"), m));
        out.push(tensor_section(format!("{prefix}.v.{i}"), v));
    }
}

fn queue_section(name: &str, q: &FeatureQueue) -> Section {
    Section {
        name: name.into(),
        shape: vec![q.len(), q.dim()],
        payload: Payload::F64(q.entries().flatten().copied().collect()),
    }
}

/// Packs a training state together with its configuration.
pub fn to_checkpoint(state: &TrainState, cfg: &RunConfig) -> Checkpoint {
    let json = cfg.to_json().into_bytes();
    let mut s = vec![Section {
        name: "config".into(),
        shape: vec![json.len()],
        payload: Payload::Bytes(json),
    }];
    let counters = vec![
        state.step,
        state.d_steps,
        state.rng.seed(),
        state.rng.position(),
        state.adam_d.t,
        state.adam_g.t,
        state.ada.updates,
        state.queue_real.capacity() as u64,
        state.queue_fake.capacity() as u64,
    ];
    s.push(Section {
        name: "counters".into(),
        shape: vec![counters.len()],
        payload: Payload::U64(counters),
    });
    bundle_sections("disc", &state.disc, &mut s);
    bundle_sections("disc_m", &state.disc_m, &mut s);
    net_sections("gen", &state.gen, &mut s);
    net_sections("gen_ema", &state.gen_ema, &mut s);
    adam_sections("adam_d", &state.adam_d, &mut s);
    adam_sections("adam_g", &state.adam_g, &mut s);
    s.push(Section {
        name: "ada.p".into(),
        shape: vec![1],
        payload: Payload::F64(vec![state.ada.p]),
    });
    s.push(Section {
        name: "ada.window".into(),
        shape: vec![state.ada.window.len()],
        payload: Payload::F64(state.ada.window.iter().copied().collect()),
    });
    s.push(queue_section("queue_real", &state.queue_real));
    s.push(queue_section("queue_fake", &state.queue_fake));
    s.push(Section {
        name: "acc.sums".into(),
        shape: vec![Accumulators::SLOTS],
        payload: Payload::F64(state.acc.sums.to_vec()),
    });
    s.push(Section {
        name: "acc.counts".into(),
        shape: vec![Accumulators::SLOTS],
        payload: Payload::U64(state.acc.counts.to_vec()),
    });
    Checkpoint {
        version: VERSION,
        config_hash: cfg.hash(),
        step: state.step,
        sections: s,
    }
}

fn fill_net(ck: &Checkpoint, prefix: &str, net: &mut NetworkParams) -> Result<(), CheckpointError> {
    let names: Vec<String> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(net.tensors_mut()) {
        let full = format!("{prefix}.{name}");
        let data = ck.f64s(&full, Some(t.shape()))?;
        t.data_mut().copy_from_slice(data);
    }
    Ok(())
}

fn fill_adam(ck: &Checkpoint, prefix: &str, a: &mut Adam) -> Result<(), CheckpointError> {
    for (i, (m, v)) in a.m.iter_mut().zip(a.v.iter_mut()).enumerate() {
        let dm = ck.f64s(&format!("{prefix}.m.{i}"), Some(m.shape()))?;
        m.data_mut().copy_from_slice(dm);
        let dv = ck.f64s(&format!("{prefix}.v.{i}"), Some(v.shape()))?;
        v.data_mut().copy_from_slice(dv);
    }
    Ok(())
}

fn fill_queue(ck: &Checkpoint, name: &str, capacity: usize, template: &FeatureQueue) -> Result<FeatureQueue, CheckpointError> {
    let s = ck.section(name)?;
    let dim = template.dim();
    if s.shape.len() != 2 || s.shape[1] != dim || s.shape[0] > capacity || capacity != template.capacity() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.into(),
            expected: vec![template.capacity(), dim],
            found: vec![capacity, s.shape.get(1).copied().unwrap_or(0)],
        });
    }
    let rows = ck.f64s(name, None)?;
    Ok(FeatureQueue::from_rows(capacity, dim, rows))
}

/// Restores a state, validating every section against the shapes implied by
/// `cfg` on a training set of `train_len` samples of width `dim`.
pub fn restore(ck: &Checkpoint, cfg: &RunConfig, train_len: usize, dim: usize) -> Result<TrainState, CheckpointError> {
    let mut st = TrainState::new(cfg, train_len, dim).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let c = ck.u64s("counters", 9)?;
    st.step = c[0];
    st.d_steps = c[1];
    st.rng = StreamRng::from_parts(c[2], c[3]);
    st.adam_d.t = c[4];
    st.adam_g.t = c[5];
    st.ada.updates = c[6];
    for n in st.disc.nets_mut() {
        fill_net(ck, "disc", n)?;
    }
    for n in st.disc_m.nets_mut() {
        fill_net(ck, "disc_m", n)?;
    }
    fill_net(ck, "gen", &mut st.gen)?;
    fill_net(ck, "gen_ema", &mut st.gen_ema)?;
    fill_adam(ck, "adam_d", &mut st.adam_d)?;
    fill_adam(ck, "adam_g", &mut st.adam_g)?;
    st.ada.p = ck.f64s("ada.p", Some(&[1]))?[0];
    let window = ck.f64s("ada.window", None)?;
    if window.len() > st.ada.window_len {
        return Err(CheckpointError::ShapeMismatch {
            name: "ada.window".into(),
            expected: vec![st.ada.window_len],
            found: vec![window.len()],
        });
    }
    st.ada.window = window.iter().copied().collect();
    st.queue_real = fill_queue(ck, "queue_real", c[7] as usize, &st.queue_real)?;
    st.queue_fake = fill_queue(ck, "queue_fake", c[8] as usize, &st.queue_fake)?;
    st.acc.sums.copy_from_slice(ck.f64s("acc.sums", Some(&[Accumulators::SLOTS]))?);
    st.acc.counts.copy_from_slice(ck.u64s("acc.counts", Accumulators::SLOTS)?);
    Ok(st)
}

/// Restores only the averaged generator, for evaluation.
pub fn restore_generator(ck: &Checkpoint, cfg: &RunConfig, dim: usize) -> Result<NetworkParams, CheckpointError> {
    let m = &cfg.model;
    let mut gen = build_generator(m.latent_dim, &m.g_hidden, dim, cfg.trainer.seed)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?
        .frozen_copy();
    fill_net(ck, "gen_ema", &mut gen)?;
    Ok(gen)
}

/// Hash of the parts of a configuration that must agree for a resumed run to
/// continue the original one: everything except the step budget and the
/// checkpoint cadence.
pub fn resume_key(cfg: &RunConfig) -> u64 {
    let mut c = cfg.clone();
    c.trainer.steps = 0;
    c.trainer.ckpt_every = 0;
    c.hash()
}

/// Restores a state for continuing `cfg`, rejecting checkpoints written under
/// a configuration that differs in anything but the step budget or the
/// checkpoint cadence.
pub fn restore_for_resume(ck: &Checkpoint, cfg: &RunConfig, train_len: usize, dim: usize) -> Result<TrainState, CheckpointError> {
    let stored = ck.config()?;
    if resume_key(&stored) != resume_key(cfg) {
        return Err(CheckpointError::ConfigMismatch(format!(
            "stored hash {:016x}, requested {:016x}",
            stored.hash(),
            cfg.hash()
        )));
    }
    restore(ck, cfg, train_len, dim)
}

/// Adapts checkpoint saving to the [`RunObserver`](crate::trainer::RunObserver)
/// interface: writes `ckpt_<step>.bin` and `last.bin` into a directory.
pub struct CheckpointWriter<'a> {
    pub dir: std::path::PathBuf,
    pub cfg: &'a RunConfig,
    pub written: Vec<std::path::PathBuf>,
}

impl CheckpointWriter<'_> {
    pub fn write(&mut self, state: &TrainState) -> Result<(), TrainError> {
        let ck = to_checkpoint(state, self.cfg);
        let bytes = ck.to_bytes();
        let path = self.dir.join(format!("ckpt_{:08}.bin", state.step));
        for p in [path.clone(), self.dir.join("last.bin")] {
            std::fs::write(&p, &bytes).map_err(|e| TrainError::Observer(format!("{}: {e}", p.display())))?;
        }
        self.written.push(path);
        Ok(())
    }
}

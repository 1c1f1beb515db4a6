//! Experiment drivers behind the command-line subcommands: single training
//! runs with CSV, checkpoints and plots; ablation presets; fake-queue length
//! sweeps; and checkpoint evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::{self, Checkpoint, CheckpointError, CheckpointWriter};
use crate::config::{apply_env, apply_override, ConfigError, RunConfig};
use crate::datasets::{load_table, DataError, Dataset};
use crate::metrics::memorization_gap;
use crate::plot::{line_chart, scatter, Series};
use crate::tensor::Tensor;
use crate::trainer::{Evaluator, RunObserver, RunRecord, TrainError, TrainState, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown preset {0:?} (expected baseline, +cr, +cf_vanilla, +cf or +cfg)")]
    UnknownPreset(String),
    #[error("queue length must be positive, got {0}")]
    BadQueueLength(i64),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExpError + '_ {
    move |source| ExpError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ExpError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Rows of the ablation table, each adding one component to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Baseline,
    Cr,
    CfVanilla,
    Cf,
    Cfg,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Baseline, Preset::Cr, Preset::CfVanilla, Preset::Cf, Preset::Cfg];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Cr => "+cr",
            Preset::CfVanilla => "+cf_vanilla",
            Preset::Cf => "+cf",
            Preset::Cfg => "+cfg",
        }
    }

    /// Switches the contrastive terms of `cfg` on or off for this row.
    /// Enabled terms keep their configured weight, or 1 if it was zero.
    pub fn apply(self, cfg: &mut RunConfig) {
        let on = |w: f64| if w > 0.0 { w } else { 1.0 };
        let l = &mut cfg.loss;
        let (r, f, g) = match self {
            Preset::Baseline => (false, false, false),
            Preset::Cr => (true, false, false),
            Preset::CfVanilla | Preset::Cf => (true, true, false),
            Preset::Cfg => (true, true, true),
        };
        l.lambda_r_d = if r { on(l.lambda_r_d) } else { 0.0 };
        l.lambda_f_d = if f { on(l.lambda_f_d) } else { 0.0 };
        l.lambda_g = if g { on(l.lambda_g) } else { 0.0 };
        if self == Preset::CfVanilla {
            cfg.contrastive.sigma_eps = 0.0;
        }
    }
}

impl FromStr for Preset {
    type Err = ExpError;

    fn from_str(s: &str) -> Result<Self, ExpError> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ExpError::UnknownPreset(s.to_string()))
    }
}

/// Writes metrics rows to CSV as they arrive, flushing after every row so an
/// aborted run keeps its history.
pub struct CsvLog {
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self, ExpError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(RunRecord::COLUMNS)
            .and_then(|_| writer.flush().map_err(csv::Error::from))
            .map_err(|e| ExpError::Invalid(format!("{}: {e}", path.display())))?;
        Ok(CsvLog { writer })
    }

    pub fn append(&mut self, r: &RunRecord) -> Result<(), TrainError> {
        self.writer
            .write_record(r.cells())
            .and_then(|_| self.writer.flush().map_err(csv::Error::from))
            .map_err(|e| TrainError::Observer(e.to_string()))
    }
}

/// Everything a training run writes to its output directory.
struct RunOutputs<'a> {
    csv: CsvLog,
    ckpt: CheckpointWriter<'a>,
    records: Vec<RunRecord>,
}

impl RunObserver for RunOutputs<'_> {
    fn on_record(&mut self, r: &RunRecord) -> Result<(), TrainError> {
        self.csv.append(r)?;
        self.records.push(r.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<(), TrainError> {
        self.ckpt.write(state)
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: u64,
    pub records: Vec<RunRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunSummary {
    pub fn last(&self) -> Option<&RunRecord> {
        self.records.last()
    }
}

/// Trains `cfg`, writing `config.json`, `metrics.csv`, checkpoints under
/// `checkpoints/` and the SVG plots into `out`. With `resume`, training
/// continues from that checkpoint and the metrics file is appended to.
pub fn train_to_dir(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary, ExpError> {
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    write_file(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
    let data = cfg.build_data()?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let state = checkpoint::restore_for_resume(&ck, cfg, data.train.len(), data.train.dim())?;
            Trainer::resume(cfg.clone(), data, state)?
        }
        None => Trainer::new(cfg.clone(), data)?,
    };
    let csv_path = out.join("metrics.csv");
    let csv = if resume.is_some() && csv_path.exists() {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(io_err(&csv_path))?;
        CsvLog {
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
        }
    } else {
        CsvLog::create(&csv_path)?
    };
    let mut obs = RunOutputs {
        csv,
        ckpt: CheckpointWriter {
            dir: ckpt_dir,
            cfg,
            written: Vec::new(),
        },
        records: Vec::new(),
    };
    trainer.run(&mut obs)?;
    let all = if resume.is_some() {
        read_metrics(&csv_path)?
    } else {
        obs.records.clone()
    };
    write_run_plots(out, &trainer, &all)?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        config_hash: cfg.hash(),
        records: obs.records,
        checkpoints: obs.ckpt.written,
    })
}

/// Parses a metrics CSV written by [`train_to_dir`].
pub fn read_metrics(path: &Path) -> Result<Vec<RunRecord>, ExpError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| ExpError::Invalid(format!("{}: {e}", path.display())))?;
    let bad = |e: String| ExpError::Invalid(format!("{}: {e}", path.display()));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| -> Result<Option<f64>, ExpError> {
            let c = row.get(i).unwrap_or("");
            if c.is_empty() {
                Ok(None)
            } else {
                c.parse().map(Some).map_err(|_| bad(format!("bad number {c:?}")))
            }
        };
        out.push(RunRecord {
            step: row.get(0).unwrap_or("").parse().map_err(|_| bad("bad step".into()))?,
            l_d: f(1)?,
            c_r_d: f(2)?,
            c_f_d: f(3)?,
            r1: f(4)?,
            l_g: f(5)?,
            c_f_g: f(6)?,
            mean_real_logit: f(7)?,
            mean_fake_logit: f(8)?,
            aug_p: f(9)?.unwrap_or(0.0),
            frechet: f(10)?.unwrap_or(f64::NAN),
            mode_coverage: f(11)?.map(|c| c as usize),
            hq_fraction: f(12)?,
        });
    }
    Ok(out)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

fn write_run_plots(out: &Path, trainer: &Trainer, records: &[RunRecord]) -> Result<(), ExpError> {
    let fakes = trainer.evaluator().sample(&trainer.state.gen_ema, trainer.state.step);
    let train = &trainer.data.train;
    write_file(
        &out.join("samples.svg"),
        &scatter(
            &format!("G-EMA samples at step {}", trainer.state.step),
            &rows(&train.samples),
            &rows(&fakes),
            train.meta.centers.as_deref(),
        ),
    )?;
    let step = |r: &RunRecord| r.step as f64;
    let series = |name: &str, get: &dyn Fn(&RunRecord) -> Option<f64>| {
        Series::new(name, records.iter().filter_map(|r| get(r).map(|v| (step(r), v))).collect())
    };
    let mut losses: Vec<Series> = Vec::new();
    for name in ["l_d", "c_r_d", "c_f_d", "r1", "l_g", "c_f_g"] {
        let s = series(name, &|r| r.losses().find(|(n, _)| *n == name).map(|(_, v)| v));
        if !s.points.is_empty() {
            losses.push(s);
        }
    }
    write_file(&out.join("losses.svg"), &line_chart("Loss parts", "step", "loss", &losses))?;
    write_file(
        &out.join("logits.svg"),
        &line_chart(
            "Discriminator logits",
            "step",
            "mean logit",
            &[series("real", &|r| r.mean_real_logit), series("fake", &|r| r.mean_fake_logit)],
        ),
    )?;
    write_file(
        &out.join("frechet.svg"),
        &line_chart("Fréchet distance", "step", "frechet", &[series("G-EMA", &|r| Some(r.frechet))]),
    )?;
    Ok(())
}

/// Loads a config file, or the defaults when `path` is `None`, with
/// `INSGEN_*` environment and `--set` overrides applied in that order.
pub fn load_config(path: Option<&Path>, env: &[(String, String)], overrides: &[String]) -> Result<RunConfig, ExpError> {
    match path {
        Some(p) => Ok(RunConfig::load(p, env, overrides)?),
        None => {
            let mut v = serde_json::Value::Object(Default::default());
            apply_env(&mut v, env)?;
            for o in overrides {
                apply_override(&mut v, o)?;
            }
            Ok(RunConfig::from_value(v)?)
        }
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary, ExpError> {
    train_to_dir(cfg, out, resume)
}

/// Final metrics of one run in a summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub frechet: f64,
    pub mode_coverage: Option<usize>,
    pub hq_fraction: Option<f64>,
    pub mean_real_logit: Option<f64>,
    pub mean_fake_logit: Option<f64>,
}

impl SummaryRow {
    fn from_run(label: String, r: &RunSummary) -> Result<Self, ExpError> {
        let last = r
            .last()
            .ok_or_else(|| ExpError::Invalid(format!("{label}: run produced no metrics")))?;
        Ok(SummaryRow {
            label,
            frechet: last.frechet,
            mode_coverage: last.mode_coverage,
            hq_fraction: last.hq_fraction,
            mean_real_logit: last.mean_real_logit,
            mean_fake_logit: last.mean_fake_logit,
        })
    }
}

fn write_summary(path: &Path, key: &str, rows: &[SummaryRow]) -> Result<(), ExpError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExpError::Invalid(format!("{}: {e}", path.display())))?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let res = (|| {
        w.write_record([key, "frechet", "mode_coverage", "hq_fraction", "mean_real_logit", "mean_fake_logit"])?;
        for r in rows {
            w.write_record([
                r.label.clone(),
                format!("{:?}", r.frechet),
                r.mode_coverage.map(|c| c.to_string()).unwrap_or_default(),
                f(r.hq_fraction),
                f(r.mean_real_logit),
                f(r.mean_fake_logit),
            ])?;
        }
        w.flush().map_err(csv::Error::from)
    })();
    res.map_err(|e| ExpError::Invalid(format!("{}: {e}", path.display())))
}

/// Runs each preset into `out/<preset>` and writes `ablation.csv`.
pub fn cmd_ablate(base: &RunConfig, presets: &[Preset], out: &Path) -> Result<Vec<SummaryRow>, ExpError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rows = Vec::new();
    for &p in presets {
        let mut cfg = base.clone();
        p.apply(&mut cfg);
        cfg.validate()?;
        log::info!("ablation preset {}", p.name());
        let run = train_to_dir(&cfg, &out.join(p.name()), None)?;
        rows.push(SummaryRow::from_run(p.name().to_string(), &run)?);
    }
    write_summary(&out.join("ablation.csv"), "preset", &rows)?;
    Ok(rows)
}

/// Validates and deduplicates queue lengths, keeping first occurrences.
pub fn queue_lengths(lengths: &[i64]) -> Result<Vec<usize>, ExpError> {
    let mut out: Vec<usize> = Vec::new();
    for &l in lengths {
        if l <= 0 {
            return Err(ExpError::BadQueueLength(l));
        }
        if out.contains(&(l as usize)) {
            log::warn!("queue length {l} given more than once; running it once");
        } else {
            out.push(l as usize);
        }
    }
    if out.is_empty() {
        return Err(ExpError::Invalid("no queue lengths given".into()));
    }
    Ok(out)
}

/// One run per fake-queue capacity into `out/queue_<n>`, then
/// `queue_sweep.csv` and `queue_sweep.svg`. With `parallel`, runs execute on
/// separate threads; results do not depend on it.
pub fn cmd_sweep_queue(base: &RunConfig, lengths: &[i64], out: &Path, parallel: bool) -> Result<Vec<SummaryRow>, ExpError> {
    let lengths = queue_lengths(lengths)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let cfgs: Vec<(usize, RunConfig)> = lengths
        .iter()
        .map(|&n| {
            let mut c = base.clone();
            c.contrastive.queue_fake = Some(n);
            c.validate().map(|_| (n, c))
        })
        .collect::<Result<_, _>>()?;
    let run = |(n, c): &(usize, RunConfig)| -> Result<SummaryRow, ExpError> {
        let r = train_to_dir(c, &out.join(format!("queue_{n}")), None)?;
        SummaryRow::from_run(n.to_string(), &r)
    };
    let rows: Vec<SummaryRow> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfgs.iter().map(|c| s.spawn(move || run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(ExpError::Invalid("sweep worker panicked".into()))))
                .collect::<Result<_, _>>()
        })?
    } else {
        cfgs.iter().map(run).collect::<Result<_, _>>()?
    };
    write_summary(&out.join("queue_sweep.csv"), "queue_fake", &rows)?;
    let pts = rows.iter().map(|r| ((r.label.parse::<f64>().unwrap_or(0.0)).log2(), r.frechet)).collect();
    write_file(
        &out.join("queue_sweep.svg"),
        &line_chart("Fréchet vs fake queue length", "log2 queue length", "frechet", &[Series::new("final", pts)]),
    )?;
    Ok(rows)
}

/// Keys written by [`cmd_eval`], always all present.
pub const EVAL_KEYS: [&str; 7] = [
    "step",
    "samples",
    "reference_size",
    "frechet",
    "mode_coverage",
    "hq_fraction",
    "memorization_gap",
];

/// Evaluates the averaged generator of a checkpoint against the config's
/// dataset, or against a CSV table when `dataset` is given. Draws ten times
/// as many samples as the dataset holds and writes `metrics.json` and
/// `samples.svg` into `out`.
pub fn cmd_eval(ckpt: &Path, dataset: Option<&Path>, out: &Path) -> Result<BTreeMap<&'static str, serde_json::Value>, ExpError> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = ck.config()?;
    let (train, reference, holdout): (Dataset, Dataset, Option<Dataset>) = match dataset {
        Some(p) => {
            let d = load_table(p)?;
            (d.clone(), d, None)
        }
        None => {
            let d = cfg.build_data()?;
            (d.train, d.reference, d.holdout)
        }
    };
    let gen = checkpoint::restore_generator(&ck, &cfg, train.dim())?;
    let n = 10 * train.len();
    let ev = Evaluator::for_reference(&cfg, &reference, n)?;
    let fakes = ev.sample(&gen, ck.step);
    let m = ev.metrics(&fakes)?;
    let gap = match &holdout {
        Some(h) => Some(memorization_gap(&fakes, &train.samples, &h.samples).map_err(TrainError::from)?),
        None => None,
    };
    let num = |v: Option<f64>| v.map(serde_json::Value::from).unwrap_or(serde_json::Value::Null);
    let mut map = BTreeMap::new();
    map.insert("step", ck.step.into());
    map.insert("samples", n.into());
    map.insert("reference_size", reference.len().into());
    map.insert("frechet", num(Some(m.frechet)));
    map.insert("mode_coverage", m.mode_coverage.map(serde_json::Value::from).unwrap_or_default());
    map.insert("hq_fraction", num(m.hq_fraction));
    map.insert("memorization_gap", num(gap));
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let json = serde_json::to_string_pretty(&map).expect("metrics serialize");
    let path = out.join("metrics.json");
    let mut f = File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "{json}").map_err(io_err(&path))?;
    write_file(
        &out.join("samples.svg"),
        &scatter(
            &format!("G-EMA samples at step {}", ck.step),
            &rows(&train.samples),
            &rows(&fakes),
            train.meta.centers.as_deref(),
        ),
    )?;
    Ok(map)
}

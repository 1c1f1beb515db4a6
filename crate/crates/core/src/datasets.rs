//! Synthetic mixtures, low-data subsampling, and CSV ingestion.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset parameter: {0}")]
    Invalid(String),
    #[error("cannot subsample {n} from {len} samples")]
    TooMany { n: usize, len: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("row {row}: expected {expected} columns, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {col}: cannot parse {text:?} as a number")]
    BadCell { row: usize, col: usize, text: String },
    #[error("row {row}: {msg}")]
    Csv { row: usize, msg: String },
    #[error("row {row}, column {col}: non-finite value")]
    NonFinite { row: usize, col: usize },
    #[error("header declares dim={declared} but rows have {found} columns")]
    DimMismatch { declared: usize, found: usize },
    #[error("no samples in table")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    /// Mixture centers, when the generating process is known.
    pub centers: Option<Vec<Vec<f64>>>,
    pub sigma: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub mode_labels: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

/// Centers equally spaced on a circle, the first at angle 0.
pub fn ring_centers(modes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..modes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / modes as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Centers of a `side × side` lattice centred on the origin.
pub fn grid_centers(side: usize, spacing: f64) -> Vec<Vec<f64>> {
    let off = (side as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            out.push(vec![spacing * (i as f64 - off), spacing * (j as f64 - off)]);
        }
    }
    out
}

/// Draws `count` points from an equal-weight isotropic mixture. Samples are
/// drawn one after another from a single stream, so a smaller count is a
/// prefix of a larger one.
pub fn make_mixture(
    name: &str,
    centers: Vec<Vec<f64>>,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if centers.is_empty() {
        return Err(DataError::Invalid("at least one mode is required".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::Invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if count == 0 {
        return Err(DataError::Invalid("count must be positive".into()));
    }
    let dim = centers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..centers.len());
        for c in &centers[k] {
            let n: f64 = rng.sample(StandardNormal);
            data.push(c + sigma * n);
        }
        labels.push(k);
    }
    Ok(Dataset {
        samples: Tensor::matrix(count, dim, data),
        mode_labels: Some(labels),
        meta: DatasetMeta {
            name: name.into(),
            centers: Some(centers),
            sigma: Some(sigma),
            seed,
        },
    })
}

pub fn make_ring(modes: usize, radius: f64, sigma: f64, count: usize, seed: u64) -> Result<Dataset, DataError> {
    if modes == 0 {
        return Err(DataError::Invalid("modes must be at least 1".into()));
    }
    make_mixture(&format!("ring{modes}"), ring_centers(modes, radius), sigma, count, seed)
}

pub fn make_grid(side: usize, spacing: f64, sigma: f64, count: usize, seed: u64) -> Result<Dataset, DataError> {
    if side == 0 {
        return Err(DataError::Invalid("side must be at least 1".into()));
    }
    make_mixture(&format!("grid{side}x{side}"), grid_centers(side, spacing), sigma, count, seed)
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn take(ds: &Dataset, idx: &[usize]) -> Dataset {
    Dataset {
        samples: ds.samples.gather_rows(idx),
        mode_labels: ds.mode_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        meta: ds.meta.clone(),
    }
}

fn mirrored(mut ds: Dataset) -> Dataset {
    let n = ds.len();
    let dim = ds.dim();
    let mut data = ds.samples.data().to_vec();
    for r in 0..n {
        let mut row = ds.samples.row(r).to_vec();
        row[0] = -row[0];
        data.extend_from_slice(&row);
    }
    let flipped = Tensor::matrix(2 * n, dim, data);
    if let (Some(labels), Some(centers)) = (ds.mode_labels.as_mut(), ds.meta.centers.as_ref()) {
        for r in 0..n {
            let mut c = centers[labels[r]].clone();
            c[0] = -c[0];
            labels.push(nearest(centers, &c));
        }
    } else {
        ds.mode_labels = None;
    }
    ds.samples = flipped;
    ds
}

/// A seeded permutation of `0..len`.
fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// `n` samples without replacement; with `mirror`, the first coordinate is
/// sign-flipped to append a second copy (size `2n`).
pub fn subsample(ds: &Dataset, n: usize, seed: u64, mirror: bool) -> Result<Dataset, DataError> {
    Ok(subsample_split(ds, n, 0, seed, mirror)?.0)
}

/// Like [`subsample`], also returning `holdout` further samples disjoint from
/// the training subset. The training subset does not depend on `holdout`.
pub fn subsample_split(
    ds: &Dataset,
    n: usize,
    holdout: usize,
    seed: u64,
    mirror: bool,
) -> Result<(Dataset, Option<Dataset>), DataError> {
    if n == 0 || n + holdout > ds.len() {
        return Err(DataError::TooMany {
            n: n + holdout,
            len: ds.len(),
        });
    }
    let perm = permutation(ds.len(), seed);
    let mut train = take(ds, &perm[..n]);
    if mirror {
        train = mirrored(train);
    }
    let held = (holdout > 0).then(|| take(ds, &perm[n..n + holdout]));
    Ok((train, held))
}

/// Reads a numeric CSV with one sample per row and an optional
/// `# dim=<d>` first line. Rows are numbered from 1 in diagnostics.
pub fn load_table(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, name: &str) -> Result<Dataset, DataError> {
    let mut declared = None;
    let mut body = text;
    if let Some(first) = text.lines().next() {
        if let Some(rest) = first.trim().strip_prefix('#') {
            let rest = rest.trim();
            if let Some(d) = rest.strip_prefix("dim=") {
                declared = Some(d.trim().parse::<usize>().map_err(|_| DataError::BadCell {
                    row: 0,
                    col: 0,
                    text: first.to_string(),
                })?);
            }
            // keep the newline so record line numbers match the file
            body = &text[first.len()..];
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(body.as_bytes());
    let mut cols = declared;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv {
            row: i + 1,
            msg: e.to_string(),
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                if rows == 0 && declared.is_some() {
                    return Err(DataError::DimMismatch {
                        declared: c,
                        found: rec.len(),
                    });
                }
                return Err(DataError::Ragged {
                    row,
                    expected: c,
                    found: rec.len(),
                });
            }
            _ => {}
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::BadCell {
                row,
                col: col + 1,
                text: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { row, col: col + 1 });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        samples: Tensor::matrix(rows, cols.unwrap(), data),
        mode_labels: None,
        meta: DatasetMeta {
            name: name.to_string(),
            centers: None,
            sigma: None,
            seed: 0,
        },
    })
}

/// Writes samples with a `# dim=<d>` header. Values use Rust's shortest
/// round-trip formatting, so loading gives back identical bits.
pub fn save_table(samples: &Tensor, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(f, "# dim={}", samples.cols()).map_err(io)?;
    for row in samples.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", line.join(",")).map_err(io)?;
    }
    f.flush().map_err(io)
}

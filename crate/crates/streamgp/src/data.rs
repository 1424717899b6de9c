//! Dataset generation, CSV ingestion, normalization, and stream construction.
//!
//! Normalization statistics are computed on the full dataset before streaming
//! (an offline concession; predictions can be mapped back through
//! [`NormStats`]). Streams split off the leading fraction as the pretrain
//! slice and chunk the remainder into batches, either in row order
//! (sequential) or under a seeded permutation (iid).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    Sin,
    Cos,
}

/// Per-column centering/scaling actually applied by [`normalize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    /// Population standard deviation per feature; 1.0 recorded for columns
    /// left unscaled.
    pub feature_sd: Vec<f64>,
    pub target_mean: f64,
    pub target_sd: f64,
    /// Columns with zero variance (centered but not scaled). Index `usize::MAX`
    /// marks the target.
    pub zero_variance_columns: Vec<usize>,
}

impl NormStats {
    /// Maps a normalized prediction back to original target units.
    pub fn denormalize_target(&self, y: f64) -> f64 {
        y * self.target_sd + self.target_mean
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_sd
    }
}

/// An in-memory regression dataset: features are rows of `x`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Statistics recorded by [`normalize`]; `None` for raw data.
    pub norm_stats: Option<NormStats>,
    /// Rows discarded during ingestion (unparseable or non-finite values).
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::input(format!(
                "dataset: {} feature rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Dataset {
            x,
            y,
            norm_stats: None,
            dropped_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Copies the selected rows into a new dataset-shaped pair.
    fn select(&self, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        (x, y)
    }
}

/// Equally spaced inputs on [0, 2*pi] with `y = sin(4x)` (or cos) plus
/// Gaussian noise. Deterministic for a fixed seed.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::input("gen_synthetic: n must be >= 1"));
    }
    if noise_sd < 0.0 {
        return Err(Error::input("gen_synthetic: noise_sd must be >= 0"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let step = if n > 1 {
        2.0 * std::f64::consts::PI / (n - 1) as f64
    } else {
        0.0
    };
    let x = DMatrix::from_fn(n, 1, |i, _| i as f64 * step);
    let y = DVector::from_fn(n, |i, _| {
        let clean = match kind {
            SyntheticKind::Sin => (4.0 * x[(i, 0)]).sin(),
            SyntheticKind::Cos => (4.0 * x[(i, 0)]).cos(),
        };
        clean + noise_sd * standard_normal(&mut rng)
    });
    Dataset::new(x, y)
}

/// Box-Muller standard normal draw; keeps the crate's RNG usage to the plain
/// uniform generator.
fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Column selector for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSel {
    Index(usize),
    Name(String),
}

/// How to interpret a delimited text file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: ColumnSel,
    /// Feature columns; `None` means every column except the target.
    pub features: Option<Vec<ColumnSel>>,
    pub has_header: bool,
}

impl CsvSchema {
    /// Target = named or last column, all other columns as features.
    pub fn with_target(target: ColumnSel, has_header: bool) -> Self {
        CsvSchema {
            target,
            features: None,
            has_header,
        }
    }
}

fn resolve_column(sel: &ColumnSel, headers: Option<&csv::StringRecord>, width: usize) -> Result<usize> {
    match sel {
        ColumnSel::Index(i) => {
            if *i < width {
                Ok(*i)
            } else {
                Err(Error::Schema(format!(
                    "column index {i} out of range for {width}-column file"
                )))
            }
        }
        ColumnSel::Name(name) => {
            let headers = headers.ok_or_else(|| {
                Error::Schema(format!("column {name:?} requested but the file has no header"))
            })?;
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("column {name:?} not found in header")))
        }
    }
}

/// Reads a comma-delimited file into a dataset. Rows with unparseable or
/// non-finite cells in selected columns are dropped and counted, not fatal.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;

    let headers = if schema.has_header {
        Some(reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone())
    } else {
        None
    };

    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut dropped = 0usize;
    let mut target_idx = None;
    let mut feature_idx: Option<Vec<usize>> = None;

    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let width = record.len();
        let t_idx = match target_idx {
            Some(i) => i,
            None => {
                let i = resolve_column(&schema.target, headers.as_ref(), width)?;
                target_idx = Some(i);
                i
            }
        };
        let f_idx = match &feature_idx {
            Some(v) => v.clone(),
            None => {
                let v = match &schema.features {
                    Some(sels) => sels
                        .iter()
                        .map(|s| resolve_column(s, headers.as_ref(), width))
                        .collect::<Result<Vec<_>>>()?,
                    None => (0..width).filter(|i| *i != t_idx).collect(),
                };
                if v.is_empty() {
                    return Err(Error::Schema("no feature columns selected".into()));
                }
                feature_idx = Some(v.clone());
                v
            }
        };

        let parse = |i: usize| -> Option<f64> {
            record
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let target = parse(t_idx);
        let feats: Option<Vec<f64>> = f_idx.iter().map(|&i| parse(i)).collect();
        match (target, feats) {
            (Some(t), Some(f)) => rows.push((f, t)),
            _ => dropped += 1,
        }
    }

    if rows.is_empty() {
        return Err(Error::Schema(format!(
            "{}: no usable rows ({dropped} dropped)",
            path.display()
        )));
    }
    let d = rows[0].0.len();
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let mut ds = Dataset::new(x, y)?;
    ds.dropped_rows = dropped;
    Ok(ds)
}

/// Centers every feature column and the target to mean zero and scales to
/// unit (population) standard deviation. Zero-variance columns are centered
/// and left unscaled, recorded in [`NormStats::zero_variance_columns`].
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::input("normalize: need at least 2 rows"));
    }
    let nf = n as f64;
    let mut x = ds.x.clone();
    let mut feature_mean = Vec::with_capacity(ds.dim());
    let mut feature_sd = Vec::with_capacity(ds.dim());
    let mut zero_var = Vec::new();

    for j in 0..ds.dim() {
        let mean = x.column(j).mean();
        let var = x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let sd = var.sqrt();
        feature_mean.push(mean);
        if sd > 0.0 {
            feature_sd.push(sd);
            for i in 0..n {
                x[(i, j)] = (x[(i, j)] - mean) / sd;
            }
        } else {
            feature_sd.push(1.0);
            zero_var.push(j);
            for i in 0..n {
                x[(i, j)] -= mean;
            }
        }
    }

    let y_mean = ds.y.mean();
    let y_var = ds.y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / nf;
    let y_sd = y_var.sqrt();
    let (y, target_sd) = if y_sd > 0.0 {
        (ds.y.map(|v| (v - y_mean) / y_sd), y_sd)
    } else {
        zero_var.push(usize::MAX);
        (ds.y.map(|v| v - y_mean), 1.0)
    };

    Ok(Dataset {
        x,
        y,
        norm_stats: Some(NormStats {
            feature_mean,
            feature_sd,
            target_mean: y_mean,
            target_sd,
            zero_variance_columns: zero_var,
        }),
        dropped_rows: ds.dropped_rows,
    })
}

/// Inverse of [`normalize`] given the recorded statistics.
pub fn denormalize(ds: &Dataset) -> Result<Dataset> {
    let stats = ds
        .norm_stats
        .as_ref()
        .ok_or_else(|| Error::input("denormalize: dataset carries no normalization stats"))?;
    let mut x = ds.x.clone();
    for j in 0..ds.dim() {
        for i in 0..ds.len() {
            x[(i, j)] = x[(i, j)] * stats.feature_sd[j] + stats.feature_mean[j];
        }
    }
    let y = ds.y.map(|v| stats.denormalize_target(v));
    Dataset::new(x, y)
}

/// Stream ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    /// Seeded random permutation of the rows.
    Iid,
    /// Original row order (time-series fashion).
    Sequential,
}

impl Ordering {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Ordering::Iid),
            "sequential" => Ok(Ordering::Sequential),
            other => Err(Error::input(format!(
                "unknown ordering {other:?} (expected iid|sequential)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ordering::Iid => "iid",
            Ordering::Sequential => "sequential",
        }
    }
}

/// One batch of observations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }
}

/// A pretrain slice plus ordered batches covering the rest of the dataset.
#[derive(Debug, Clone)]
pub struct Stream {
    pub pretrain: Batch,
    pub batches: Vec<Batch>,
    pub ordering: Ordering,
    pub batch_size: usize,
    pub seed: u64,
}

impl Stream {
    /// Total number of rows across the pretrain slice and all batches.
    pub fn total_len(&self) -> usize {
        self.pretrain.len() + self.batches.iter().map(Batch::len).sum::<usize>()
    }
}

/// Splits the dataset into a pretrain slice (the leading
/// `ceil(pretrain_frac * n)` rows after ordering) and batches of
/// `batch_size` (the last batch may be short).
pub fn make_stream(
    ds: &Dataset,
    ordering: Ordering,
    batch_size: usize,
    pretrain_frac: f64,
    seed: u64,
) -> Result<Stream> {
    if batch_size == 0 {
        return Err(Error::input("make_stream: batch_size must be >= 1"));
    }
    if !(pretrain_frac > 0.0 && pretrain_frac < 1.0) {
        return Err(Error::input(format!(
            "make_stream: pretrain_frac must be in (0,1), got {pretrain_frac}"
        )));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    if ordering == Ordering::Iid {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }

    let n_pre = (pretrain_frac * n as f64).ceil() as usize;
    if n_pre == 0 {
        return Err(Error::input("make_stream: pretrain slice is empty"));
    }
    if n_pre > n {
        return Err(Error::input("make_stream: pretrain slice exceeds dataset"));
    }

    let (px, py) = ds.select(&order[..n_pre]);
    let pretrain = Batch { x: px, y: py };
    let batches = order[n_pre..]
        .chunks(batch_size)
        .map(|rows| {
            let (x, y) = ds.select(rows);
            Batch { x, y }
        })
        .collect();

    Ok(Stream {
        pretrain,
        batches,
        ordering,
        batch_size,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    #[test]
    fn sin_grid_hits_exact_values() {
        // n=17 puts pi/8 on the grid: sin(4 * pi/8) = 1.
        let ds = gen_synthetic(SyntheticKind::Sin, 17, 0.0, 0).unwrap();
        let idx = (0..17)
            .find(|&i| (ds.x[(i, 0)] - std::f64::consts::FRAC_PI_8).abs() < 1e-12)
            .expect("pi/8 on the grid");
        assert_relative_eq!(ds.y[idx], 1.0, epsilon = 1e-12);

        let dc = gen_synthetic(SyntheticKind::Cos, 9, 0.0, 0).unwrap();
        assert_eq!(dc.x[(0, 0)], 0.0);
        assert_relative_eq!(dc.y[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn synthetic_noise_variance_in_chisq_band() {
        let ds = gen_synthetic(SyntheticKind::Sin, 500, 0.1, 42).unwrap();
        let resid: Vec<f64> = (0..500)
            .map(|i| ds.y[i] - (4.0 * ds.x[(i, 0)]).sin())
            .collect();
        let mean = resid.iter().sum::<f64>() / 500.0;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / 499.0;
        assert!(
            (0.007..=0.013).contains(&var),
            "noise variance {var} outside chi-square band"
        );
    }

    #[test]
    fn synthetic_deterministic_per_seed() {
        let a = gen_synthetic(SyntheticKind::Sin, 50, 0.1, 7).unwrap();
        let b = gen_synthetic(SyntheticKind::Sin, 50, 0.1, 7).unwrap();
        assert_eq!(a.y, b.y);
        let c = gen_synthetic(SyntheticKind::Sin, 50, 0.1, 8).unwrap();
        assert_ne!(a.y, c.y);
    }

    fn write_temp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_one_row() {
        let f = write_temp_csv("a,b,t\n1.0,2.0,3.0\n");
        let schema = CsvSchema::with_target(ColumnSel::Name("t".into()), true);
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.y[0], 3.0);
        assert_eq!(ds.dropped_rows, 0);
    }

    #[test]
    fn csv_corrupt_cell_drops_exactly_one_row() {
        let f = write_temp_csv("a,t\n1.0,2.0\noops,3.0\n4.0,5.0\n");
        let schema = CsvSchema::with_target(ColumnSel::Index(1), true);
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dropped_rows, 1);
    }

    #[test]
    fn csv_missing_column_is_schema_error() {
        let f = write_temp_csv("a,b\n1.0,2.0\n");
        let schema = CsvSchema::with_target(ColumnSel::Name("target".into()), true);
        assert!(matches!(load_csv(f.path(), &schema), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_non_finite_dropped() {
        let f = write_temp_csv("a,t\n1.0,2.0\ninf,3.0\n");
        let schema = CsvSchema::with_target(ColumnSel::Index(1), true);
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.dropped_rows, 1);
    }

    #[test]
    fn normalize_two_point_column() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
            DVector::from_vec(vec![0.0, 2.0]),
        )
        .unwrap();
        let nd = normalize(&ds).unwrap();
        assert_relative_eq!(nd.x[(0, 0)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(nd.x[(1, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(nd.y[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_idempotent() {
        let ds = gen_synthetic(SyntheticKind::Sin, 100, 0.2, 3).unwrap();
        let once = normalize(&ds).unwrap();
        let twice = normalize(&once).unwrap();
        assert_relative_eq!(once.x, twice.x, epsilon = 1e-10);
        assert_relative_eq!(once.y, twice.y, epsilon = 1e-10);
    }

    #[test]
    fn normalize_moments_and_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(200, 5, |_, _| rand::Rng::random::<f64>(&mut rng) * 10.0 - 3.0);
        let y = DVector::from_fn(200, |_, _| rand::Rng::random::<f64>(&mut rng) * 4.0);
        let ds = Dataset::new(x, y).unwrap();
        let nd = normalize(&ds).unwrap();

        for j in 0..5 {
            let mean = nd.x.column(j).mean();
            let var = nd.x.column(j).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 200.0;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }

        let back = denormalize(&nd).unwrap();
        assert_relative_eq!(back.x, ds.x, epsilon = 1e-10);
        assert_relative_eq!(back.y, ds.y, epsilon = 1e-10);
    }

    #[test]
    fn normalize_zero_variance_column() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]),
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        let nd = normalize(&ds).unwrap();
        let stats = nd.norm_stats.as_ref().unwrap();
        assert_eq!(stats.zero_variance_columns, vec![0]);
        for i in 0..3 {
            assert_eq!(nd.x[(i, 0)], 0.0);
        }
    }

    #[test]
    fn normalize_rejects_single_row() {
        let ds = Dataset::new(DMatrix::from_row_slice(1, 1, &[1.0]), DVector::from_vec(vec![1.0])).unwrap();
        assert!(matches!(normalize(&ds), Err(Error::Input(_))));
    }

    #[test]
    fn stream_split_arithmetic() {
        let ds = gen_synthetic(SyntheticKind::Sin, 100, 0.0, 0).unwrap();
        let s = make_stream(&ds, Ordering::Sequential, 5, 0.05, 0).unwrap();
        assert_eq!(s.pretrain.len(), 5);
        assert_eq!(s.batches.len(), 19);
        assert!(s.batches.iter().all(|b| b.len() == 5));
        assert_eq!(s.total_len(), 100);
    }

    #[test]
    fn sequential_stream_preserves_row_order() {
        let ds = gen_synthetic(SyntheticKind::Sin, 23, 0.1, 1).unwrap();
        let s = make_stream(&ds, Ordering::Sequential, 4, 0.1, 0).unwrap();
        let mut xs: Vec<f64> = s.pretrain.x.column(0).iter().copied().collect();
        for b in &s.batches {
            xs.extend(b.x.column(0).iter().copied());
        }
        let expect: Vec<f64> = ds.x.column(0).iter().copied().collect();
        assert_eq!(xs, expect);
    }

    #[test]
    fn iid_permutation_seed_behaviour() {
        let ds = gen_synthetic(SyntheticKind::Sin, 40, 0.1, 1).unwrap();
        let a = make_stream(&ds, Ordering::Iid, 4, 0.1, 11).unwrap();
        let b = make_stream(&ds, Ordering::Iid, 4, 0.1, 11).unwrap();
        let c = make_stream(&ds, Ordering::Iid, 4, 0.1, 12).unwrap();
        assert_eq!(a.pretrain.x, b.pretrain.x);
        assert_eq!(a.batches[0].x, b.batches[0].x);
        assert_ne!(
            (a.pretrain.x.clone(), a.batches[0].x.clone()),
            (c.pretrain.x.clone(), c.batches[0].x.clone())
        );
    }

    #[test]
    fn stream_conserves_rows() {
        // Every dataset row appears exactly once across pretrain + batches.
        let ds = gen_synthetic(SyntheticKind::Sin, 57, 0.1, 2).unwrap();
        for ordering in [Ordering::Iid, Ordering::Sequential] {
            let s = make_stream(&ds, ordering, 5, 0.07, 3).unwrap();
            let mut seen: Vec<f64> = s.pretrain.x.column(0).iter().copied().collect();
            for b in &s.batches {
                seen.extend(b.x.column(0).iter().copied());
            }
            seen.sort_by(f64::total_cmp);
            let mut expect: Vec<f64> = ds.x.column(0).iter().copied().collect();
            expect.sort_by(f64::total_cmp);
            assert_eq!(seen, expect);
        }
    }

    #[test]
    fn stream_rejects_bad_args() {
        let ds = gen_synthetic(SyntheticKind::Sin, 10, 0.0, 0).unwrap();
        assert!(make_stream(&ds, Ordering::Iid, 0, 0.05, 0).is_err());
        assert!(make_stream(&ds, Ordering::Iid, 2, 0.0, 0).is_err());
        assert!(make_stream(&ds, Ordering::Iid, 2, 1.0, 0).is_err());
    }
}

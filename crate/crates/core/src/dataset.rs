//! Tabular data with a missingness mask, CSV ingestion, and synthetic generators.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MdmaError, Result};

/// `n × d` values with a parallel mask (`true` = missing). Masked values are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    missing: Array2<bool>,
    columns: Vec<String>,
}

impl Dataset {
    pub fn new(values: Array2<f64>, missing: Array2<bool>, columns: Vec<String>) -> Result<Self> {
        if values.dim() != missing.dim() {
            return Err(MdmaError::Shape("mask shape differs from values".into()));
        }
        if columns.len() != values.ncols() {
            return Err(MdmaError::Shape(format!(
                "{} column names for {} columns",
                columns.len(),
                values.ncols()
            )));
        }
        for (r, row) in missing.axis_iter(Axis(0)).enumerate() {
            if row.iter().all(|&m| m) {
                return Err(MdmaError::FullyMissingRow(r));
            }
        }
        for ((r, c), v) in values.indexed_iter() {
            if !missing[[r, c]] && !v.is_finite() {
                return Err(MdmaError::Parse {
                    row: r,
                    col: c,
                    msg: "non-finite value".into(),
                });
            }
        }
        Ok(Dataset {
            values,
            missing,
            columns,
        })
    }

    /// Fully observed data with generated column names `x1..xd`.
    pub fn complete(values: Array2<f64>) -> Result<Self> {
        let d = values.ncols();
        let missing = Array2::from_elem(values.dim(), false);
        Self::new(values, missing, default_columns(d))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn missing(&self) -> ArrayView2<'_, bool> {
        self.missing.view()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing.iter().filter(|&&m| m).count() as f64 / self.missing.len().max(1) as f64
    }

    /// Rows in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            values: self.values.select(Axis(0), idx),
            missing: self.missing.select(Axis(0), idx),
            columns: self.columns.clone(),
        }
    }

    /// Hides each entry independently with probability `rate`, never hiding a whole row.
    pub fn with_mcar<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Dataset {
        let mut missing = self.missing.clone();
        let d = self.d();
        for mut row in missing.axis_iter_mut(Axis(0)) {
            for m in row.iter_mut() {
                if rng.random::<f64>() < rate {
                    *m = true;
                }
            }
            if row.iter().all(|&m| m) {
                let keep = rng.random_range(0..d);
                row[keep] = false;
            }
        }
        Dataset {
            values: self.values.clone(),
            missing,
            columns: self.columns.clone(),
        }
    }

    /// Deterministic shuffle followed by a split of the trailing `fraction` of rows.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        idx.shuffle(rng);
        let n_tail = ((self.n() as f64) * fraction).round() as usize;
        let n_head = self.n() - n_tail.min(self.n());
        (self.select(&idx[..n_head]), self.select(&idx[n_head..]))
    }

    /// Rows without any missing entry.
    pub fn complete_rows(&self) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.n())
            .filter(|&r| self.missing.row(r).iter().all(|&m| !m))
            .collect();
        self.values.select(Axis(0), &idx)
    }
}

pub fn default_columns(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Parses CSV with a header line. Cells equal to `missing_token`, empty cells, and `NA` are
/// marked missing.
pub fn read_csv<R: Read>(reader: R, missing_token: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let columns: Vec<String> = rdr
        .headers()
        .map_err(|e| MdmaError::Io(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let d = columns.len();
    let mut values = Vec::new();
    let mut missing = Vec::new();
    let mut n = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| MdmaError::Io(e.to_string()))?;
        if record.len() != d {
            return Err(MdmaError::RaggedRow {
                row,
                expected: d,
                found: record.len(),
            });
        }
        let mut observed = 0;
        for (col, cell) in record.iter().enumerate() {
            if cell == missing_token || cell.is_empty() || cell == "NA" {
                values.push(0.0);
                missing.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| MdmaError::Parse {
                    row,
                    col,
                    msg: format!("cannot parse `{cell}` as a number"),
                })?;
                if !v.is_finite() {
                    return Err(MdmaError::Parse {
                        row,
                        col,
                        msg: "non-finite value".into(),
                    });
                }
                values.push(v);
                missing.push(false);
                observed += 1;
            }
        }
        if observed == 0 {
            return Err(MdmaError::FullyMissingRow(row));
        }
        n += 1;
    }
    let values = Array2::from_shape_vec((n, d), values).expect("row-major fill");
    let missing = Array2::from_shape_vec((n, d), missing).expect("row-major fill");
    Dataset::new(values, missing, columns)
}

pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), missing_token)
}

/// Writes a header and rows using shortest round-trip float formatting. Missing cells are
/// written as `NA`.
pub fn write_csv<W: Write>(
    writer: W,
    columns: &[String],
    values: ArrayView2<f64>,
    missing: Option<ArrayView2<bool>>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(columns)
        .map_err(|e| MdmaError::Io(e.to_string()))?;
    for (r, row) in values.axis_iter(Axis(0)).enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if missing.map(|m| m[[r, c]]).unwrap_or(false) {
                    "NA".to_string()
                } else {
                    format!("{v:?}")
                }
            })
            .collect();
        w.write_record(&cells)
            .map_err(|e| MdmaError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(
        std::io::BufWriter::new(file),
        &dataset.columns,
        dataset.values(),
        Some(dataset.missing()),
    )
}

/// Draws `n` rows from `N(0, cov)` via a Cholesky factor.
pub fn sample_gaussian<R: Rng + ?Sized>(cov: &Array2<f64>, n: usize, rng: &mut R) -> Array2<f64> {
    let l = cholesky(cov).expect("covariance must be positive definite");
    let d = cov.nrows();
    let mut out = Array2::zeros((n, d));
    let mut z = Array1::<f64>::zeros(d);
    for mut row in out.axis_iter_mut(Axis(0)) {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        row.assign(&l.dot(&z));
    }
    out
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let v = a[[i, i]] - s;
                if v <= 0.0 {
                    return None;
                }
                l[[i, j]] = v.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Some(l)
}

pub fn log_det_spd(a: &Array2<f64>) -> Option<f64> {
    let l = cholesky(a)?;
    Some(2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>())
}

/// Covariance `Σ_ij = δ_ij + (1 - δ_ij)(i + j - 2)/(5d)` with 1-based `i, j`.
pub fn mi_benchmark_covariance(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| {
        if i == j {
            1.0
        } else {
            // zero-based indices: (i+1)+(j+1)-2 = i+j
            (i + j) as f64 / (5.0 * d as f64)
        }
    })
}

/// Closed-form mutual information between two disjoint index sets of a Gaussian.
pub fn gaussian_mi(cov: &Array2<f64>, y: &[usize], z: &[usize]) -> f64 {
    let sub = |idx: &[usize]| cov.select(Axis(0), idx).select(Axis(1), idx);
    let joint: Vec<usize> = y.iter().chain(z).copied().collect();
    let ld = |idx: &[usize]| log_det_spd(&sub(idx)).expect("SPD covariance");
    0.5 * (ld(y) + ld(z) - ld(&joint))
}

/// Three-dimensional ring of eight Gaussians: the planar ring in `(x1, x2)`, with `x3` a
/// Gaussian whose mean alternates in sign between neighbouring ring components.
pub fn eight_gaussians_3d<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let scale = 4.0;
    let mut out = Array2::zeros((n, 3));
    for mut row in out.axis_iter_mut(Axis(0)) {
        let k = rng.random_range(0..8usize);
        let angle = k as f64 * std::f64::consts::FRAC_PI_4;
        let e: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        row[0] = (scale * angle.cos() + 0.5 * e[0]) / std::f64::consts::SQRT_2;
        row[1] = (scale * angle.sin() + 0.5 * e[1]) / std::f64::consts::SQRT_2;
        row[2] = if k % 2 == 0 { 1.0 } else { -1.0 } + 0.5 * e[2];
    }
    out
}

/// Three-dimensional two spirals: the planar spirals in `(x1, x2)` and `x3` growing with the
/// distance along the arm.
pub fn two_spirals_3d<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 3));
    for mut row in out.axis_iter_mut(Axis(0)) {
        let u: f64 = rng.random();
        let t = u.sqrt() * 540.0 * (2.0 * std::f64::consts::PI) / 360.0;
        let arm = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let e: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        row[0] = arm * (-t.cos() * t) / 3.0 + 0.1 * e[0];
        row[1] = arm * (t.sin() * t) / 3.0 + 0.1 * e[1];
        row[2] = t / 3.0 - 1.5 + 0.3 * e[2];
    }
    out
}

/// Three-dimensional checkerboard: the planar checkerboard in `(x1, x2)`, `x3` uniform on a
/// cell chosen by the parity of the planar cell.
pub fn checkerboard_3d<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 3));
    for mut row in out.axis_iter_mut(Axis(0)) {
        let x1 = rng.random::<f64>() * 4.0 - 2.0;
        let x2_ = rng.random::<f64>() - rng.random_range(0..2u8) as f64 * 2.0;
        let x2 = x2_ + (x1.floor() as i64).rem_euclid(2) as f64;
        row[0] = x1 * 2.0;
        row[1] = x2 * 2.0;
        let parity = ((x1.floor() as i64) + (x2.floor() as i64)).rem_euclid(2) as f64;
        row[2] = (rng.random::<f64>() + parity - 1.0) * 2.0;
    }
    out
}

/// Sample mean and (MLE) covariance of the rows.
pub fn mean_cov(data: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = data.nrows() as f64;
    let mean = data.mean_axis(Axis(0)).expect("non-empty data");
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n;
    (mean, cov)
}

/// Mean negative log-likelihood of `data` under `N(mean, cov)`.
pub fn gaussian_nll(data: ArrayView2<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> f64 {
    let d = cov.nrows();
    let l = cholesky(cov).expect("SPD covariance");
    let log_det = 2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>();
    let mut total = 0.0;
    for row in data.axis_iter(Axis(0)) {
        // solve L y = (x - mean)
        let diff = &row - mean;
        let mut y = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
            y[i] = (diff[i] - s) / l[[i, i]];
        }
        let q: f64 = y.iter().map(|v| v * v).sum();
        total += 0.5 * (q + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln());
    }
    total / data.nrows() as f64
}

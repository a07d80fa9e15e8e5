//! Synthetic 2-D generators and tabular CSV ingestion.
//!
//! Tabular data is shuffled with a seed, split into test (10%), validation
//! (10% of the remainder) and training rows, and standardized with
//! statistics computed on the training rows only.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

/// Component standard deviation of the two-Gaussian toy.
pub const TWO_GAUSSIANS_STD: f64 = 2.0 / 3.0;
/// Default concentration of the von Mises toy.
pub const VON_MISES_KAPPA: f64 = 1.0;
/// Default size of each toy split.
pub const TOY_SPLIT_SIZE: usize = 10_000;
/// Fewer rows than this cannot be split.
pub const MIN_CSV_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column}: cannot parse `{value}` as a number")]
    Parse { row: usize, column: usize, value: String },
    #[error("row {row} has {got} fields, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("dataset has {rows} rows, at least {MIN_CSV_ROWS} are needed")]
    TooSmall { rows: usize },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("no columns left after dropping constant ones")]
    NoColumns,
}

/// Per-column affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column mean and population standard deviation (ddof = 0).
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = *v * self.std[c] + self.mean[c];
        }
        out
    }
}

/// Standardized train/validation/test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// Where the rows came from (file path or generator description).
    pub source: String,
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    pub stats: Standardization,
    /// Names (or indices) of the retained columns.
    pub columns: Vec<String>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.cols()
    }
}

/// Equal-weight mixture of `N((0, 2), s^2 I)` and `N((0, -2), s^2 I)` with
/// `s = 2/3`. Component labels are independent fair coin flips.
pub fn gen_two_gaussians<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let k = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let (mx, my) = two_gaussians_mean(k);
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        data.push(mx + TWO_GAUSSIANS_STD * ex);
        data.push(my + TWO_GAUSSIANS_STD * ey);
    }
    Tensor::matrix(n, 2, data).expect("shape")
}

/// Mean of mixture component `k`: `(2 sin(pi k), 2 cos(pi k))`.
pub fn two_gaussians_mean(k: f64) -> (f64, f64) {
    // sin(pi) is not exactly zero in floating point
    let x = if k.fract() == 0.0 { 0.0 } else { 2.0 * (PI * k).sin() };
    (x, 2.0 * (PI * k).cos())
}

/// Draws one angle from a von Mises distribution (Best and Fisher's
/// rejection sampler). Returned angles lie in `(mu - pi, mu + pi]`.
pub fn sample_von_mises<R: Rng + ?Sized>(mu: f64, kappa: f64, rng: &mut R) -> f64 {
    if kappa < 1e-8 {
        return mu + PI * (2.0 * rng.gen::<f64>() - 1.0);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            return if u3 > 0.5 { mu + theta } else { mu - theta };
        }
    }
}

/// Points `(cos t, sin t)` with `t ~ vonMises(mu, kappa)`.
pub fn gen_von_mises_circle_with<R: Rng + ?Sized>(n: usize, mu: f64, kappa: f64, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = sample_von_mises(mu, kappa, rng);
        data.push(t.cos());
        data.push(t.sin());
    }
    Tensor::matrix(n, 2, data).expect("shape")
}

/// Unit-circle von Mises toy with `mu = 0`, `kappa = 1`.
pub fn gen_von_mises_circle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    gen_von_mises_circle_with(n, 0.0, VON_MISES_KAPPA, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    TwoGaussians,
    VonMises,
}

/// Toy dataset with independent train and test draws and an empty
/// validation split. Toy data is used as generated (identity
/// standardization).
pub fn toy_dataset<R: Rng + ?Sized>(kind: ToyKind, n_train: usize, n_test: usize, mu: f64, rng: &mut R) -> Dataset {
    let (name, gen): (&str, Box<dyn Fn(usize, &mut R) -> Tensor>) = match kind {
        ToyKind::TwoGaussians => ("two-gaussians", Box::new(|n, r| gen_two_gaussians(n, r))),
        ToyKind::VonMises => (
            "von-mises",
            Box::new(move |n, r| gen_von_mises_circle_with(n, mu, VON_MISES_KAPPA, r)),
        ),
    };
    let train = gen(n_train, rng);
    let test = gen(n_test, rng);
    Dataset {
        name: name.to_string(),
        source: format!("generated: {name}"),
        train,
        val: Tensor::zeros(&[0, 2]),
        test,
        stats: Standardization::identity(2),
        columns: vec!["x".into(), "y".into()],
        warnings: Vec::new(),
    }
}

/// Reads a numeric CSV into a matrix. A first row containing any
/// non-numeric field is treated as a header. Returns the column names
/// (header names or 0-based indices) and the rows.
pub fn read_csv_matrix(path: &Path) -> Result<(Vec<String>, Tensor), DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut names: Option<Vec<String>> = None;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 1;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(Result::is_err) {
            names = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DatasetError::Ragged {
                row: line,
                got: record.len(),
                expected,
            });
        }
        for (c, (v, raw)) in parsed.into_iter().zip(record.iter()).enumerate() {
            match v {
                Ok(v) if v.is_finite() => data.push(v),
                _ => {
                    return Err(DatasetError::Parse {
                        row: line,
                        column: c + 1,
                        value: raw.to_string(),
                    })
                }
            }
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    let names = names.unwrap_or_else(|| (0..width).map(|c| c.to_string()).collect());
    let matrix = Tensor::matrix(rows, width, data).expect("rows are rectangular");
    Ok((names, matrix))
}

/// Loads a numeric CSV and builds standardized splits.
pub fn load_csv(path: &Path, split_seed: u64) -> Result<Dataset, DatasetError> {
    load_csv_dropping(path, split_seed, &[])
}

/// Like [`load_csv`], first removing the named columns (header names or
/// 0-based indices).
pub fn load_csv_dropping(path: &Path, split_seed: u64, drop: &[&str]) -> Result<Dataset, DatasetError> {
    let (names, matrix) = read_csv_matrix(path)?;
    let mut keep: Vec<usize> = (0..names.len()).collect();
    for d in drop {
        let idx = names
            .iter()
            .position(|n| n == d)
            .or_else(|| d.parse::<usize>().ok().filter(|&i| i < names.len()))
            .ok_or_else(|| DatasetError::UnknownColumn(d.to_string()))?;
        keep.retain(|&k| k != idx);
    }
    let rows: Vec<Vec<f64>> = (0..matrix.rows())
        .map(|r| keep.iter().map(|&c| matrix.get(r, c)).collect())
        .collect();
    let names: Vec<String> = keep.iter().map(|&c| names[c].clone()).collect();
    let stem = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
    split_and_standardize(&stem, &path.display().to_string(), names, rows, split_seed)
}

/// Split sizes `(test, val, train)` for `n` rows.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n / 10;
    let val = (n - test) / 10;
    (test, val, n - test - val)
}

/// Shuffles rows with `split_seed`, splits them and standardizes with
/// training statistics. Columns that are constant on the training rows
/// are dropped and reported in `warnings`.
pub fn split_and_standardize(
    name: &str,
    source: &str,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    split_seed: u64,
) -> Result<Dataset, DatasetError> {
    let n = rows.len();
    if n < MIN_CSV_ROWS {
        return Err(DatasetError::TooSmall { rows: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let (n_test, n_val, _) = split_sizes(n);
    let pick = |idx: &[usize]| -> Tensor {
        let d = columns.len();
        let data = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        Tensor::matrix(idx.len(), d, data).expect("shape")
    };
    let test = pick(&order[..n_test]);
    let val = pick(&order[n_test..n_test + n_val]);
    let train = pick(&order[n_test + n_val..]);

    let full = Standardization::fit(&train);
    let keep: Vec<usize> = (0..columns.len()).filter(|&c| full.std[c] > 0.0).collect();
    let mut warnings = Vec::new();
    for c in (0..columns.len()).filter(|c| !keep.contains(c)) {
        warnings.push(format!("dropped constant column `{}`", columns[c]));
    }
    if keep.is_empty() {
        return Err(DatasetError::NoColumns);
    }
    let project = |t: &Tensor| -> Tensor {
        let data = (0..t.rows()).flat_map(|r| keep.iter().map(move |&c| t.get(r, c))).collect();
        Tensor::matrix(t.rows(), keep.len(), data).expect("shape")
    };
    let (train, val, test) = (project(&train), project(&val), project(&test));
    let stats = Standardization {
        mean: keep.iter().map(|&c| full.mean[c]).collect(),
        std: keep.iter().map(|&c| full.std[c]).collect(),
    };
    Ok(Dataset {
        name: name.to_string(),
        source: source.to_string(),
        train: stats.apply(&train),
        val: stats.apply(&val),
        test: stats.apply(&test),
        stats,
        columns: keep.iter().map(|&c| columns[c].clone()).collect(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn mixture_means_and_std() {
        assert_eq!(two_gaussians_mean(0.0), (0.0, 2.0));
        assert_eq!(two_gaussians_mean(1.0), (0.0, -2.0));
        assert!((TWO_GAUSSIANS_STD - 0.666_666_666_666_666_6).abs() < 1e-15);
        assert!((TWO_GAUSSIANS_STD - 2.0 / 3.0 * (PI / 2.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn two_gaussians_mean_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let x = gen_two_gaussians(n, &mut rng);
        let s = Standardization::fit(&x);
        // per-axis std of the mixture: sqrt(s^2 + 4) on y, s on x
        let band_x = 4.0 * TWO_GAUSSIANS_STD / (n as f64).sqrt();
        let band_y = 4.0 * (TWO_GAUSSIANS_STD.powi(2) + 4.0).sqrt() / (n as f64).sqrt();
        assert!(s.mean[0].abs() < band_x, "{}", s.mean[0]);
        assert!(s.mean[1].abs() < band_y, "{}", s.mean[1]);
    }

    #[test]
    fn von_mises_on_unit_circle_with_mean_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gen_von_mises_circle(50_000, &mut rng);
        for r in 0..x.rows() {
            let (a, b) = (x.get(r, 0), x.get(r, 1));
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
        let s = Standardization::fit(&x);
        // E[cos t] = I1(1)/I0(1) = 0.4463899658965...
        assert!((s.mean[0] - 0.446_389_965_896_5).abs() < 0.01, "{}", s.mean[0]);
        assert!(s.mean[1].abs() < 0.01);
    }

    #[test]
    fn von_mises_small_kappa_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mut bins = [0usize; 8];
        for _ in 0..n {
            let t = sample_von_mises(0.0, 0.0, &mut rng);
            assert!((-PI..=PI).contains(&t));
            bins[(((t + PI) / (2.0 * PI) * 8.0) as usize).min(7)] += 1;
        }
        let expect = n as f64 / 8.0;
        for b in bins {
            assert!((b as f64 - expect).abs() < 5.0 * expect.sqrt(), "{bins:?}");
        }
    }

    fn write_csv(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn split_of_hundred_rows() {
        assert_eq!(split_sizes(100), (10, 9, 81));
        let mut lines = vec!["a,b,const".to_string()];
        lines.extend((0..100).map(|i| format!("{},{},7", i, (i * i) % 13)));
        let f = write_csv(&lines);
        let d = load_csv(f.path(), 5).unwrap();
        assert_eq!((d.test.rows(), d.val.rows(), d.train.rows()), (10, 9, 81));
        assert_eq!(d.columns, vec!["a", "b"]);
        assert_eq!(d.warnings.len(), 1);
        let s = Standardization::fit(&d.train);
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-10);
            assert!((s.std[c] - 1.0).abs() < 1e-10);
        }
        let again = load_csv(f.path(), 5).unwrap();
        assert_eq!(again.test, d.test);
        let other = load_csv(f.path(), 6).unwrap();
        assert_ne!(other.test, d.test);
    }

    #[test]
    fn bad_cell_reports_position() {
        let f = write_csv(&["1,2".into(), "3,x".into()]);
        match read_csv_matrix(f.path()) {
            Err(DatasetError::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_small() {
        let f = write_csv(&(0..9).map(|i| format!("{i},1.5")).collect::<Vec<_>>());
        assert!(matches!(load_csv(f.path(), 0), Err(DatasetError::TooSmall { rows: 9 })));
    }

    #[test]
    fn drop_named_column() {
        let mut lines = vec!["a,b,c".to_string()];
        lines.extend((0..20).map(|i| format!("{},{},{}", i, 2 * i % 7, i % 3)));
        let f = write_csv(&lines);
        let d = load_csv_dropping(f.path(), 0, &["b"]).unwrap();
        assert_eq!(d.columns, vec!["a", "c"]);
        assert!(matches!(
            load_csv_dropping(f.path(), 0, &["zz"]),
            Err(DatasetError::UnknownColumn(_))
        ));
    }
}

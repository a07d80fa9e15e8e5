//! Squared MMD, held-out log-likelihood, metric records and 2-D grid
//! exports.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::flows::{FlowError, FlowModel};
use crate::model::{Model, ModelError};

/// Kernel lengthscale `l` in `s2 * exp(-|x - y|^2 / (2 l))`.
pub const MMD_LENGTHSCALE: f64 = 1.0;
/// Kernel variance `s2`.
pub const MMD_VARIANCE: f64 = 1e-4;
/// Row block size for kernel evaluation.
pub const MMD_TILE: usize = 1024;
/// Printed MMD values are also reported multiplied by this.
pub const MMD_REPORT_SCALE: f64 = 1e4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {left} vs {right} columns")]
    Dimension { left: usize, right: usize },
    #[error("MMD needs at least two rows per sample set, got {0}")]
    TooFewSamples(usize),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimator {
    /// Biased plug-in estimate; exactly zero for identical sets.
    #[default]
    V,
    /// Unbiased estimate (diagonal terms excluded).
    U,
}

/// Mean of `exp(-|a_i - b_j|^2 / (2 l))` over all pairs, or over `i != j`
/// when `skip_diagonal`.
fn kernel_mean(a: &Tensor, b: &Tensor, l: f64, skip_diagonal: bool) -> f64 {
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let (ad, bd) = (a.data(), b.data());
    let inv = -0.5 / l;
    let mut total = 0.0;
    for i0 in (0..n).step_by(MMD_TILE) {
        for j0 in (0..m).step_by(MMD_TILE) {
            let mut tile = 0.0;
            for i in i0..(i0 + MMD_TILE).min(n) {
                let x = &ad[i * d..(i + 1) * d];
                let mut row = 0.0;
                for j in j0..(j0 + MMD_TILE).min(m) {
                    if skip_diagonal && i == j {
                        continue;
                    }
                    let y = &bd[j * d..(j + 1) * d];
                    let mut s = 0.0;
                    for k in 0..d {
                        let t = x[k] - y[k];
                        s += t * t;
                    }
                    row += (inv * s).exp();
                }
                tile += row;
            }
            total += tile;
        }
    }
    let pairs = if skip_diagonal { n * (m - 1) } else { n * m };
    total / pairs as f64
}

fn lexicographic(a: &Tensor, b: &Tensor) -> Ordering {
    a.rows().cmp(&b.rows()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Squared MMD with kernel `variance * exp(-|x - y|^2 / (2 lengthscale))`.
///
/// The result is symmetric in its arguments bit for bit, never negative for
/// the V-statistic, and linear in `variance`.
pub fn mmd2_rbf_with(x: &Tensor, y: &Tensor, lengthscale: f64, variance: f64, estimator: MmdEstimator) -> Result<f64, EvalError> {
    if x.cols() != y.cols() {
        return Err(EvalError::Dimension {
            left: x.cols(),
            right: y.cols(),
        });
    }
    let min_rows = x.rows().min(y.rows());
    if min_rows < 2 {
        return Err(EvalError::TooFewSamples(min_rows));
    }
    let (a, b) = if lexicographic(x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    let unbiased = estimator == MmdEstimator::U;
    let kaa = kernel_mean(a, a, lengthscale, unbiased);
    let kbb = kernel_mean(b, b, lengthscale, unbiased);
    let kab = kernel_mean(a, b, lengthscale, false);
    let raw = kaa + kbb - 2.0 * kab;
    let raw = if unbiased { raw } else { raw.max(0.0) };
    Ok(variance * raw)
}

/// V-statistic squared MMD at the default kernel (`l = 1`, `s2 = 1e-4`).
pub fn mmd2_rbf(x: &Tensor, y: &Tensor) -> Result<f64, EvalError> {
    mmd2_rbf_with(x, y, MMD_LENGTHSCALE, MMD_VARIANCE, MmdEstimator::V)
}

/// Average held-out log-likelihood in nats per row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgLogLik {
    pub value: f64,
    /// False when the value is a lower bound (VAE importance sampling).
    pub exact: bool,
}

/// Importance samples used for VAE held-out bounds.
pub const VAE_EVAL_IMPORTANCE_SAMPLES: usize = 100;

pub fn avg_test_loglik<R: Rng + ?Sized>(model: &Model, test: &Tensor, rng: &mut R) -> Result<AvgLogLik, EvalError> {
    let ll = model.log_likelihood(test, VAE_EVAL_IMPORTANCE_SAMPLES, rng)?;
    let n = ll.values.len().max(1) as f64;
    Ok(AvgLogLik {
        value: ll.values.iter().sum::<f64>() / n,
        exact: ll.exact,
    })
}

/// One evaluation event of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    pub wall_ms: u64,
    pub train_loss: f64,
    pub mmd2: Option<f64>,
    pub test_ll: Option<f64>,
    pub schedule_sigma2: f64,
}

/// Square evaluation grid over `[lo, hi]^2` with `resolution` cells per
/// axis; values sit at cell centres.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, resolution: usize) -> Result<Self, EvalError> {
        if !(hi > lo) || resolution == 0 || !lo.is_finite() || !hi.is_finite() {
            return Err(EvalError::Unsupported(format!(
                "grid needs lo < hi and a positive resolution, got [{lo}, {hi}] x {resolution}"
            )));
        }
        Ok(Self { lo, hi, resolution })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.step() * self.step()
    }

    pub fn centre(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.step()
    }

    /// All cell centres, row `i` (y) major, column `j` (x) minor.
    pub fn points(&self) -> Tensor {
        let r = self.resolution;
        let mut data = Vec::with_capacity(2 * r * r);
        for i in 0..r {
            for j in 0..r {
                data.push(self.centre(j));
                data.push(self.centre(i));
            }
        }
        Tensor::matrix(r * r, 2, data).expect("shape")
    }

    fn header(&self, what: &str) -> String {
        format!("# {what} bounds {} {} resolution {}", self.lo, self.hi, self.resolution)
    }
}

/// Density values `exp(log p)` at every grid cell centre.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub grid: Grid,
    /// Row-major, `values[i * res + j]` at `(centre(j), centre(i))`.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn argmax(&self) -> (f64, f64) {
        let r = self.grid.resolution;
        let (k, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
        (self.grid.centre(k % r), self.grid.centre(k / r))
    }

    /// Cell centres of the `fraction` highest-density cells (at least one).
    pub fn top_cells(&self, fraction: f64) -> Vec<(f64, f64)> {
        let r = self.grid.resolution;
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]));
        let count = ((self.values.len() as f64 * fraction).ceil() as usize).max(1);
        idx.into_iter()
            .take(count)
            .map(|k| (self.grid.centre(k % r), self.grid.centre(k / r)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let r = self.grid.resolution;
        let mut out = self.grid.header("density");
        out.push('\n');
        for i in 0..r {
            let row: Vec<String> = self.values[i * r..(i + 1) * r].iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Score vectors `grad_x log p` at every grid cell centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    pub grid: Grid,
    /// `(x, y, sx, sy)` per cell, same ordering as [`Grid::points`].
    pub rows: Vec<[f64; 4]>,
}

impl ScoreGrid {
    pub fn to_text(&self) -> String {
        let mut out = self.grid.header("score x y sx sy");
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{:e} {:e} {:e} {:e}", r[0], r[1], r[2], r[3]).unwrap();
        }
        out
    }
}

fn require_2d(dim: usize) -> Result<(), EvalError> {
    if dim != 2 {
        return Err(EvalError::Unsupported(format!("grid export needs a 2-D model, got D = {dim}")));
    }
    Ok(())
}

pub fn export_density_grid(model: &FlowModel, grid: &Grid) -> Result<DensityGrid, EvalError> {
    require_2d(model.dim())?;
    let lp = model.log_prob(&grid.points())?;
    Ok(DensityGrid {
        grid: grid.clone(),
        values: lp.into_iter().map(f64::exp).collect(),
    })
}

pub fn export_score_grid(model: &FlowModel, grid: &Grid) -> Result<ScoreGrid, EvalError> {
    require_2d(model.dim())?;
    let pts = grid.points();
    let s = model.score(&pts)?;
    let rows = (0..pts.rows())
        .map(|r| [pts.get(r, 0), pts.get(r, 1), s.get(r, 0), s.get(r, 1)])
        .collect();
    Ok(ScoreGrid { grid: grid.clone(), rows })
}

/// Points as space-separated rows under a one-line `#` header.
pub fn points_to_text(points: &Tensor) -> String {
    let mut out = format!("# points n {} dim {}\n", points.rows(), points.cols());
    for r in 0..points.rows() {
        let row: Vec<String> = points.row(r).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

//! Exact-likelihood normalizing flows.
//!
//! A [`FlowModel`] is an ordered stack of bijections between data space and
//! a standard-normal latent space. Each layer is written in the
//! data-to-latent ("normalizing") direction, which is what density
//! evaluation needs:
//!
//! `log p(x) = log N(z; 0, I) + sum_k log |det dh_k / dh_{k-1}|`
//!
//! Sampling runs the stack backwards from `z ~ N(0, I)`.

mod batchnorm;
mod coupling;
mod maf;

pub use batchnorm::{BatchNormBijection, BatchStats, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
pub use coupling::{CouplingLayer, INITIAL_SCALE_BOUND};
pub use maf::MaskedAutoregressiveLayer;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::nn::{Bound, ParamSet};

/// Rows evaluated per graph when a large batch is processed without
/// gradients.
pub const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("numeric failure in flow layer {layer}: {source}")]
    Numeric {
        layer: usize,
        #[source]
        source: AutodiffError,
    },
    #[error("numeric failure in flow: {0}")]
    Autodiff(#[from] AutodiffError),
    #[error("invalid flow spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} columns, flow expects {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    RealNvp,
    Maf,
}

/// Architecture of a flow; enough to rebuild it before loading weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub kind: FlowKind,
    pub dim: usize,
    /// Number of coupling or autoregressive layers.
    pub layers: usize,
    /// Hidden widths of each conditioner network.
    pub hidden: Vec<usize>,
    /// Insert a batch-norm bijection after every coupling/autoregressive layer.
    pub batchnorm: bool,
}

#[derive(Clone, Debug)]
pub enum Bijection {
    Coupling(CouplingLayer),
    Autoregressive(MaskedAutoregressiveLayer),
    BatchNorm(BatchNormBijection),
}

/// Result of a graph-level density evaluation.
pub struct FlowForward {
    /// Per-row log-density, `[rows, 1]`.
    pub log_prob: Var,
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    spec: FlowSpec,
    params: ParamSet,
    layers: Vec<Bijection>,
    training: bool,
}

fn tag(layer: usize) -> impl Fn(AutodiffError) -> FlowError {
    move |source| FlowError::Numeric { layer, source }
}

/// `log N(z; 0, I)` per row, `[rows, 1]`.
pub fn standard_normal_log_prob(g: &mut Graph, z: Var) -> Result<Var, AutodiffError> {
    let d = g.value(z).cols() as f64;
    let sq = g.square(z)?;
    let ss = g.sum_rows(sq)?;
    let half = g.scale(ss, -0.5)?;
    g.add_scalar(half, -0.5 * d * (2.0 * PI).ln())
}

impl FlowModel {
    pub fn new<R: Rng>(spec: FlowSpec, rng: &mut R) -> Result<Self, FlowError> {
        if spec.dim == 0 {
            return Err(FlowError::InvalidSpec("dimension must be positive".into()));
        }
        if spec.kind == FlowKind::RealNvp && spec.dim < 2 {
            return Err(FlowError::InvalidSpec(
                "coupling layers need at least two dimensions".into(),
            ));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut order: Vec<usize> = (1..=spec.dim).collect();
        for i in 0..spec.layers {
            let name = format!("layer{}", layers.len());
            let layer = match spec.kind {
                FlowKind::RealNvp => {
                    Bijection::Coupling(CouplingLayer::new(&mut params, &name, spec.dim, i % 2, &spec.hidden, rng))
                }
                FlowKind::Maf => {
                    let l = MaskedAutoregressiveLayer::new(&mut params, &name, order.clone(), &spec.hidden, rng);
                    // reverse the ordering for the next layer
                    order = order.iter().map(|o| spec.dim + 1 - o).collect();
                    Bijection::Autoregressive(l)
                }
            };
            layers.push(layer);
            if spec.batchnorm {
                let name = format!("layer{}", layers.len());
                layers.push(Bijection::BatchNorm(BatchNormBijection::new(&mut params, &name, spec.dim)));
            }
        }
        Ok(Self {
            spec,
            params,
            layers,
            training: false,
        })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layers(&self) -> &[Bijection] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Bijection] {
        &mut self.layers
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    fn check_dim(&self, x: &Tensor) -> Result<(), FlowError> {
        if !x.is_matrix() || x.cols() != self.spec.dim {
            return Err(FlowError::Dimension {
                expected: self.spec.dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn layer_normalize(
        &self,
        i: usize,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Var), FlowError> {
        let t = tag(i);
        match &self.layers[i] {
            Bijection::Coupling(c) => c.normalize(g, p, h).map_err(t),
            Bijection::Autoregressive(m) => m.normalize(g, p, h).map_err(t),
            Bijection::BatchNorm(bn) => {
                let (out, ld, s) = bn.normalize(g, p, h, self.training).map_err(t)?;
                if let Some((mean, var)) = s {
                    stats.push(BatchStats { layer: i, mean, var });
                }
                Ok((out, ld))
            }
        }
    }

    fn layer_generate(&self, i: usize, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, FlowError> {
        let t = tag(i);
        match &self.layers[i] {
            Bijection::Coupling(c) => c.generate(g, p, z).map_err(t),
            Bijection::Autoregressive(m) => m.generate(g, p, z).map_err(t),
            Bijection::BatchNorm(bn) => bn.generate(g, p, z).map_err(t),
        }
    }

    /// Records the full data-to-latent pass and the log-density on `g`.
    pub fn log_prob_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<FlowForward, FlowError> {
        self.check_dim(g.value(x))?;
        let mut stats = Vec::new();
        let mut h = x;
        let mut log_det: Option<Var> = None;
        for i in 0..self.layers.len() {
            let (out, ld) = self.layer_normalize(i, g, p, h, &mut stats)?;
            h = out;
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, ld).map_err(tag(i))?,
                None => ld,
            });
        }
        let base = standard_normal_log_prob(g, h).map_err(tag(self.layers.len()))?;
        let log_prob = match log_det {
            Some(ld) => g.add(base, ld)?,
            None => base,
        };
        Ok(FlowForward {
            log_prob,
            batch_stats: stats,
        })
    }

    fn chunked(&self, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor, FlowError>) -> Result<Tensor, FlowError> {
        if x.rows() <= EVAL_CHUNK {
            return f(x);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + EVAL_CHUNK).min(x.rows());
            parts.push(f(&x.slice_rows(start, end))?);
            start = end;
        }
        Ok(Tensor::vstack(&parts)?)
    }

    /// Per-row log-density without recording gradients.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>, FlowError> {
        self.check_dim(x)?;
        let out = self.chunked(x, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let xv = g.constant(chunk.clone());
            let fwd = self.log_prob_graph(&mut g, &p, xv)?;
            Ok(g.value(fwd.log_prob).clone())
        })?;
        Ok(out.into_data())
    }

    /// Data-to-latent map `f^{-1}(x)`.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor, FlowError> {
        self.check_dim(x)?;
        self.chunked(x, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let mut h = g.constant(chunk.clone());
            let mut stats = Vec::new();
            for i in 0..self.layers.len() {
                h = self.layer_normalize(i, &mut g, &p, h, &mut stats)?.0;
            }
            Ok(g.value(h).clone())
        })
    }

    /// Latent-to-data map `f(z)`. Batch-norm layers use running statistics.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor, FlowError> {
        self.check_dim(z)?;
        if z.rows() == 0 {
            return Ok(z.clone());
        }
        self.chunked(z, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let mut h = g.constant(chunk.clone());
            for i in (0..self.layers.len()).rev() {
                h = self.layer_generate(i, &mut g, &p, h)?;
            }
            Ok(g.value(h).clone())
        })
    }

    /// Single layer in the data-to-latent direction; returns the output and
    /// per-row log-det.
    pub fn layer_forward(&self, layer: usize, x: &Tensor) -> Result<(Tensor, Vec<f64>), FlowError> {
        self.check_dim(x)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let h = g.constant(x.clone());
        let (out, ld) = self.layer_normalize(layer, &mut g, &p, h, &mut Vec::new())?;
        Ok((g.value(out).clone(), g.value(ld).data().to_vec()))
    }

    /// Single layer in the latent-to-data direction.
    pub fn layer_inverse(&self, layer: usize, z: &Tensor) -> Result<Tensor, FlowError> {
        self.check_dim(z)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let h = g.constant(z.clone());
        let out = self.layer_generate(layer, &mut g, &p, h)?;
        Ok(g.value(out).clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor, FlowError> {
        let d = self.spec.dim;
        let z: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        self.generate(&Tensor::matrix(n, d, z)?)
    }

    /// Input gradient of the log-density, `[rows, dim]`.
    pub fn score(&self, x: &Tensor) -> Result<Tensor, FlowError> {
        self.check_dim(x)?;
        self.chunked(x, |chunk| {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let xv = g.variable(chunk.clone());
            let fwd = self.log_prob_graph(&mut g, &p, xv)?;
            let total = g.sum(fwd.log_prob)?;
            let grads = g.backward(total)?;
            Ok(grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(chunk.shape())))
        })
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            if let Some(Bijection::BatchNorm(bn)) = self.layers.get_mut(s.layer) {
                bn.update_running(&s.mean, &s.var);
            }
        }
    }

    /// Named non-trainable buffers (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Bijection::BatchNorm(bn) = l {
                out.push((format!("layer{i}.running_mean"), bn.running_mean.clone()));
                out.push((format!("layer{i}.running_var"), bn.running_var.clone()));
            }
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<(), FlowError> {
        let bad = || FlowError::InvalidSpec(format!("unknown or mis-sized buffer `{name}`"));
        let (layer, field) = name.split_once('.').ok_or_else(bad)?;
        let idx: usize = layer.strip_prefix("layer").and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let Some(Bijection::BatchNorm(bn)) = self.layers.get_mut(idx) else {
            return Err(bad());
        };
        let target = match field {
            "running_mean" => &mut bn.running_mean,
            "running_var" => &mut bn.running_var,
            _ => return Err(bad()),
        };
        if target.len() != values.len() {
            return Err(bad());
        }
        target.copy_from_slice(values);
        Ok(())
    }
}

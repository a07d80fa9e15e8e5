use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::nn::{column_mean, repeat_row, Bound, ParamId, ParamSet};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Batch normalization as a bijection.
///
/// Data-to-latent map `y = (x - m) / sqrt(v + eps) * exp(log_gain) + bias`.
/// In training mode `(m, v)` are the batch mean and biased variance and the
/// gradient flows through them; in evaluation mode the running estimates
/// are used and the map is a fixed affine function of `x`.
#[derive(Clone, Debug)]
pub struct BatchNormBijection {
    pub log_gain: ParamId,
    pub bias: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch statistics observed during a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormBijection {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            log_gain: params.add(format!("{name}.log_gain"), Tensor::zeros(&[1, dim])),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BATCHNORM_MOMENTUM,
            eps: BATCHNORM_EPS,
        }
    }

    /// Returns `(output, per-row log-det, batch stats when training)`.
    pub fn normalize(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        training: bool,
    ) -> Result<(Var, Var, Option<(Vec<f64>, Vec<f64>)>), AutodiffError> {
        let rows = g.value(x).rows();
        let dim = self.running_mean.len();
        let (centered, var, stats) = if training {
            let mean = column_mean(g, x)?;
            let neg_mean = g.neg(mean)?;
            let centered = g.add_bias(x, neg_mean)?;
            let sq = g.square(centered)?;
            let var = column_mean(g, sq)?;
            let stats = (g.value(mean).data().to_vec(), g.value(var).data().to_vec());
            (centered, var, Some(stats))
        } else {
            let neg_mean = g.constant(Tensor::matrix(1, dim, self.running_mean.iter().map(|m| -m).collect())?);
            let centered = g.add_bias(x, neg_mean)?;
            let var = g.constant(Tensor::matrix(1, dim, self.running_var.clone())?);
            (centered, var, None)
        };
        let shifted = g.add_scalar(var, self.eps)?;
        let log_var = g.log(shifted)?;
        let log_std = g.scale(log_var, 0.5)?;
        let log_scale = g.sub(p[self.log_gain], log_std)?;
        let scale = g.exp(log_scale)?;
        let scale_rows = repeat_row(g, scale, rows)?;
        let scaled = g.mul(centered, scale_rows)?;
        let out = g.add_bias(scaled, p[self.bias])?;
        let ld = g.sum_rows(log_scale)?;
        let log_det = repeat_row(g, ld, rows)?;
        Ok((out, log_det, stats))
    }

    /// Latent-to-data direction using the running statistics.
    pub fn generate(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var, AutodiffError> {
        let yv = g.value(y).clone();
        let gain = g.value(p[self.log_gain]).clone();
        let bias = g.value(p[self.bias]).clone();
        let mut x = yv;
        let dim = self.running_mean.len();
        for r in 0..x.rows() {
            for d in 0..dim {
                let std = (self.running_var[d] + self.eps).sqrt();
                let v = (x.get(r, d) - bias.data()[d]) * (-gain.data()[d]).exp() * std + self.running_mean[d];
                x.set(r, d, v);
            }
        }
        if !x.all_finite() {
            return Err(AutodiffError::NonFinite { op: "batchnorm_generate" });
        }
        Ok(g.constant(x))
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::nn::{Activation, Bound, Mlp, ParamSet};

/// MADE-conditioned affine autoregressive bijection.
///
/// `order[d]` is the 1-based position of input column `d` in the
/// autoregressive ordering. The masked network outputs `mu` and
/// `log_sigma` for every column, each depending only on columns that come
/// strictly earlier in the ordering; the data-to-latent map is
/// `z = (x - mu) * exp(-log_sigma)`.
#[derive(Clone, Debug)]
pub struct MaskedAutoregressiveLayer {
    pub order: Vec<usize>,
    pub made: Mlp,
}

/// Hidden-unit degrees cycle through `1..dim` so every degree is used.
fn hidden_degrees(width: usize, dim: usize) -> Vec<usize> {
    let span = dim.saturating_sub(1).max(1);
    (0..width).map(|k| k % span + 1).collect()
}

fn mask(in_deg: &[usize], out_deg: &[usize], strict: bool) -> Tensor {
    let mut m = Tensor::zeros(&[in_deg.len(), out_deg.len()]);
    for (i, &a) in in_deg.iter().enumerate() {
        for (j, &b) in out_deg.iter().enumerate() {
            let connected = if strict { b > a } else { b >= a };
            if connected {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

impl MaskedAutoregressiveLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, order: Vec<usize>, hidden: &[usize], rng: &mut R) -> Self {
        let dim = order.len();
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * dim);
        let mut made = Mlp::new(params, &format!("{name}.made"), &sizes, Activation::Tanh, true, rng);

        let out_deg: Vec<usize> = order.iter().chain(&order).copied().collect();
        let mut prev = order.clone();
        let n = made.layers.len();
        for (i, layer) in made.layers.iter_mut().enumerate() {
            if i + 1 < n {
                let deg = if dim > 1 {
                    hidden_degrees(layer.fan_out, dim)
                } else {
                    // One column: nothing may feed the outputs.
                    vec![usize::MAX; layer.fan_out]
                };
                layer.mask = Some(mask(&prev, &deg, false));
                prev = deg;
            } else {
                layer.mask = Some(mask(&prev, &out_deg, true));
            }
        }
        Self { order, made }
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Returns `(mu, log_sigma)`, both `[rows, dim]`.
    pub fn conditioner(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var), AutodiffError> {
        let d = self.dim();
        let out = self.made.forward(g, p, x)?;
        let mu_idx: Vec<usize> = (0..d).collect();
        let ls_idx: Vec<usize> = (d..2 * d).collect();
        let mu = g.gather_cols(out, &mu_idx)?;
        let log_sigma = g.gather_cols(out, &ls_idx)?;
        Ok((mu, log_sigma))
    }

    pub fn normalize(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<(Var, Var), AutodiffError> {
        let (mu, log_sigma) = self.conditioner(g, p, h)?;
        let centered = g.sub(h, mu)?;
        let neg = g.neg(log_sigma)?;
        let inv_sigma = g.exp(neg)?;
        let z = g.mul(centered, inv_sigma)?;
        let sum = g.sum_rows(log_sigma)?;
        let log_det = g.neg(sum)?;
        Ok((z, log_det))
    }

    /// Inverts column by column following the ordering (one network pass
    /// per dimension).
    pub fn generate(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, AutodiffError> {
        let zt = g.value(z).clone();
        let (rows, d) = (zt.rows(), self.dim());
        let mut x = Tensor::zeros(&[rows, d]);
        for step in 1..=d {
            let xv = g.constant(x.clone());
            let (mu, ls) = self.conditioner(g, p, xv)?;
            let (mu, ls) = (g.value(mu).clone(), g.value(ls).clone());
            for col in (0..d).filter(|&c| self.order[c] == step) {
                for r in 0..rows {
                    let v = zt.get(r, col) * ls.get(r, col).exp() + mu.get(r, col);
                    x.set(r, col, v);
                }
            }
        }
        if !x.all_finite() {
            return Err(AutodiffError::NonFinite { op: "maf_generate" });
        }
        Ok(g.constant(x))
    }
}

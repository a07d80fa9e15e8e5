use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::nn::{repeat_row, Activation, Bound, Mlp, ParamId, ParamSet};

/// Initial value of the trainable bound on the coupling log-scale.
pub const INITIAL_SCALE_BOUND: f64 = 2.0;

/// Affine coupling bijection.
///
/// Columns in `cond` pass through unchanged and condition the affine map
/// applied to the columns in `trans`:
/// `z_trans = x_trans * exp(s(x_cond)) + t(x_cond)`, with
/// `s = bound * tanh(scale_net(x_cond))`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub cond: Vec<usize>,
    pub trans: Vec<usize>,
    /// Position of each original column inside `[cond | trans]`.
    inv_perm: Vec<usize>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    pub bound: ParamId,
}

impl CouplingLayer {
    /// Builds a layer whose mask selects the even (`parity == 0`) or odd
    /// columns as the conditioning half.
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, dim: usize, parity: usize, hidden: &[usize], rng: &mut R) -> Self {
        assert!(dim >= 2, "coupling needs at least two dimensions");
        let (cond, trans): (Vec<usize>, Vec<usize>) = (0..dim).partition(|d| d % 2 == parity % 2);
        let mut inv_perm = vec![0; dim];
        for (pos, &col) in cond.iter().chain(&trans).enumerate() {
            inv_perm[col] = pos;
        }
        let sizes = |inp: usize, out: usize| {
            let mut s = vec![inp];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let scale_net = Mlp::new(
            params,
            &format!("{name}.scale"),
            &sizes(cond.len(), trans.len()),
            Activation::Tanh,
            true,
            rng,
        );
        let shift_net = Mlp::new(
            params,
            &format!("{name}.shift"),
            &sizes(cond.len(), trans.len()),
            Activation::Relu,
            true,
            rng,
        );
        let bound = params.add(format!("{name}.bound"), Tensor::full(&[1, 1], INITIAL_SCALE_BOUND));
        Self {
            cond,
            trans,
            inv_perm,
            scale_net,
            shift_net,
            bound,
        }
    }

    fn scale_shift(&self, g: &mut Graph, p: &Bound, x_cond: Var) -> Result<(Var, Var), AutodiffError> {
        let rows = g.value(x_cond).rows();
        let raw = self.scale_net.forward(g, p, x_cond)?;
        let squashed = g.tanh(raw)?;
        // bound is [1, 1]: expand to [rows, |trans|] explicitly.
        let col = repeat_row(g, p[self.bound], rows)?;
        let ones = g.constant(Tensor::full(&[1, self.trans.len()], 1.0));
        let bound = g.matmul(col, ones)?;
        let s = g.mul(squashed, bound)?;
        let t = self.shift_net.forward(g, p, x_cond)?;
        Ok((s, t))
    }

    /// Data-to-latent direction. Returns the output and per-row log-det.
    pub fn normalize(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<(Var, Var), AutodiffError> {
        let x_cond = g.gather_cols(h, &self.cond)?;
        let x_trans = g.gather_cols(h, &self.trans)?;
        let (s, t) = self.scale_shift(g, p, x_cond)?;
        let es = g.exp(s)?;
        let scaled = g.mul(x_trans, es)?;
        let z_trans = g.add(scaled, t)?;
        let joined = g.concat_cols(x_cond, z_trans)?;
        let out = g.gather_cols(joined, &self.inv_perm)?;
        let log_det = g.sum_rows(s)?;
        Ok((out, log_det))
    }

    /// Latent-to-data direction.
    pub fn generate(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, AutodiffError> {
        let z_cond = g.gather_cols(z, &self.cond)?;
        let z_trans = g.gather_cols(z, &self.trans)?;
        let (s, t) = self.scale_shift(g, p, z_cond)?;
        let centered = g.sub(z_trans, t)?;
        let neg_s = g.neg(s)?;
        let inv_scale = g.exp(neg_s)?;
        let x_trans = g.mul(centered, inv_scale)?;
        let joined = g.concat_cols(z_cond, x_trans)?;
        g.gather_cols(joined, &self.inv_perm)
    }
}

//! Gaussian variational autoencoder for low-dimensional data.
//!
//! The encoder maps `x` to the mean and log-variance of a diagonal Gaussian
//! `q(z|x)` over `P` latent dimensions; the decoder maps `z` to a diagonal
//! Gaussian `p(x|z)` over the `D` data dimensions. The prior is `N(0, I)`.
//! Both log-variances are clamped to `[-7, 7]`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::nn::{Activation, Bound, Mlp, ParamSet};

pub const LOG_VAR_MIN: f64 = -7.0;
pub const LOG_VAR_MAX: f64 = 7.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VaeError {
    #[error("numeric failure in VAE: {0}")]
    Numeric(#[from] AutodiffError),
    #[error("invalid VAE spec: {0}")]
    InvalidSpec(String),
    #[error("input has {got} columns, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("number of importance samples must be at least 1")]
    ImportanceSamples,
}

/// How [`VaeModel::sample`] turns latent draws into data points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Decoder mean `mu_x(z)`.
    #[default]
    Mean,
    /// A draw from `p(x|z)`.
    Draw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub dim: usize,
    pub latent: usize,
    /// Hidden widths shared by encoder and decoder; empty means linear maps.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub sample_mode: SampleMode,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    spec: VaeSpec,
    params: ParamSet,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Graph handles for one reparameterized pass.
pub struct VaeTerms {
    /// `log p(x|z)`, `[rows, 1]`.
    pub recon: Var,
    /// Closed-form `KL(q(z|x) || p(z))`, `[rows, 1]`.
    pub kl: Var,
    /// `log p(x|z) + log p(z) - log q(z|x)`, `[rows, 1]`.
    pub log_weight: Var,
}

/// Batch-averaged ELBO and its two parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `sum_d log N(x_d; mu_d, exp(log_var_d))` per row.
fn gaussian_log_density(g: &mut Graph, x: Var, mu: Var, log_var: Var) -> Result<Var, AutodiffError> {
    let d = g.value(x).cols() as f64;
    let diff = g.sub(x, mu)?;
    let sq = g.square(diff)?;
    let neg = g.neg(log_var)?;
    let inv_var = g.exp(neg)?;
    let quad = g.mul(sq, inv_var)?;
    let inner = g.add(quad, log_var)?;
    let s = g.sum_rows(inner)?;
    let half = g.scale(s, -0.5)?;
    g.add_scalar(half, -0.5 * d * (2.0 * PI).ln())
}

/// Standard-normal draws shaped `[rows, cols]`.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

impl VaeModel {
    pub fn new<R: Rng>(spec: VaeSpec, rng: &mut R) -> Result<Self, VaeError> {
        if spec.dim == 0 || spec.latent == 0 {
            return Err(VaeError::InvalidSpec("dimensions must be positive".into()));
        }
        let mut params = ParamSet::new();
        let mut enc = vec![spec.dim];
        enc.extend_from_slice(&spec.hidden);
        enc.push(2 * spec.latent);
        let mut dec = vec![spec.latent];
        dec.extend_from_slice(&spec.hidden);
        dec.push(2 * spec.dim);
        let encoder = Mlp::new(&mut params, "encoder", &enc, Activation::Tanh, false, rng);
        let decoder = Mlp::new(&mut params, "decoder", &dec, Activation::Tanh, false, rng);
        Ok(Self {
            spec,
            params,
            encoder,
            decoder,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn latent(&self) -> usize {
        self.spec.latent
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_dim(&self, x: &Tensor) -> Result<(), VaeError> {
        if !x.is_matrix() || x.cols() != self.spec.dim {
            return Err(VaeError::Dimension {
                expected: self.spec.dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn split(&self, g: &mut Graph, out: Var, half: usize) -> Result<(Var, Var), AutodiffError> {
        let a: Vec<usize> = (0..half).collect();
        let b: Vec<usize> = (half..2 * half).collect();
        let mu = g.gather_cols(out, &a)?;
        let raw = g.gather_cols(out, &b)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mu, log_var))
    }

    /// `(mu_z, log_var_z)` of `q(z|x)`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var), AutodiffError> {
        let out = self.encoder.forward(g, p, x)?;
        self.split(g, out, self.spec.latent)
    }

    /// `(mu_x, log_var_x)` of `p(x|z)`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<(Var, Var), AutodiffError> {
        let out = self.decoder.forward(g, p, z)?;
        self.split(g, out, self.spec.dim)
    }

    /// One reparameterized pass with fixed noise `eps` (`[rows, latent]`).
    pub fn terms(&self, g: &mut Graph, p: &Bound, x: Var, eps: &Tensor) -> Result<VaeTerms, AutodiffError> {
        let (mu_z, lv_z) = self.encode(g, p, x)?;
        let e = g.constant(eps.clone());
        let half_lv = g.scale(lv_z, 0.5)?;
        let std = g.exp(half_lv)?;
        let noise = g.mul(std, e)?;
        let z = g.add(mu_z, noise)?;
        let (mu_x, lv_x) = self.decode(g, p, z)?;
        let recon = gaussian_log_density(g, x, mu_x, lv_x)?;

        // KL = 0.5 * sum(mu^2 + var - 1 - log var)
        let mu_sq = g.square(mu_z)?;
        let var = g.exp(lv_z)?;
        let a = g.add(mu_sq, var)?;
        let b = g.sub(a, lv_z)?;
        let c = g.add_scalar(b, -1.0)?;
        let s = g.sum_rows(c)?;
        let kl = g.scale(s, 0.5)?;

        // log q(z|x) = log N(eps; 0, I) - 0.5 * sum(log var)
        let p_dim = eps.cols() as f64;
        let mut eps_rows = Tensor::zeros(&[eps.rows(), 1]);
        for r in 0..eps.rows() {
            let ss: f64 = eps.row(r).iter().map(|v| v * v).sum();
            eps_rows.set(r, 0, -0.5 * ss - 0.5 * p_dim * (2.0 * PI).ln());
        }
        let base_q = g.constant(eps_rows);
        let lv_sum = g.sum_rows(lv_z)?;
        let half_lv_sum = g.scale(lv_sum, -0.5)?;
        let log_q = g.add(base_q, half_lv_sum)?;

        let z_sq = g.square(z)?;
        let zs = g.sum_rows(z_sq)?;
        let zh = g.scale(zs, -0.5)?;
        let log_prior = g.add_scalar(zh, -0.5 * p_dim * (2.0 * PI).ln())?;

        let joint = g.add(recon, log_prior)?;
        let log_weight = g.sub(joint, log_q)?;
        Ok(VaeTerms { recon, kl, log_weight })
    }

    /// Batch-mean ELBO with closed-form KL: `mean(recon - beta * kl)`.
    pub fn elbo_graph(&self, g: &mut Graph, p: &Bound, x: Var, eps: &Tensor, beta: f64) -> Result<Var, VaeError> {
        if !(beta > 0.0) {
            return Err(VaeError::Beta(beta));
        }
        let t = self.terms(g, p, x, eps)?;
        let weighted = g.scale(t.kl, beta)?;
        let per_row = g.sub(t.recon, weighted)?;
        Ok(g.mean(per_row)?)
    }

    /// Batch-mean importance-weighted bound from `eps.len()` noise draws.
    /// With one draw this is the single-sample Monte Carlo ELBO.
    pub fn iwae_graph(&self, g: &mut Graph, p: &Bound, x: Var, eps: &[Tensor]) -> Result<Var, VaeError> {
        if eps.is_empty() {
            return Err(VaeError::ImportanceSamples);
        }
        let mut weights = Vec::with_capacity(eps.len());
        for e in eps {
            weights.push(self.terms(g, p, x, e)?.log_weight);
        }
        if weights.len() == 1 {
            return Ok(g.mean(weights[0])?);
        }
        // log-mean-exp with the row-wise max held constant
        let rows = g.value(x).rows();
        let mut m = Tensor::full(&[rows, 1], f64::NEG_INFINITY);
        for &w in &weights {
            for r in 0..rows {
                m.set(r, 0, m.get(r, 0).max(g.value(w).get(r, 0)));
            }
        }
        let mc = g.constant(m);
        let mut acc: Option<Var> = None;
        for &w in &weights {
            let shifted = g.sub(w, mc)?;
            let e = g.exp(shifted)?;
            acc = Some(match acc {
                Some(a) => g.add(a, e)?,
                None => e,
            });
        }
        let l = g.log(acc.expect("non-empty"))?;
        let lm = g.add(l, mc)?;
        let per_row = g.add_scalar(lm, -(weights.len() as f64).ln())?;
        Ok(g.mean(per_row)?)
    }

    /// ELBO estimate with one reparameterized draw per row.
    pub fn elbo<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R, beta: f64) -> Result<ElboEstimate, VaeError> {
        self.check_dim(x)?;
        let eps = standard_normal(x.rows(), self.spec.latent, rng);
        self.elbo_with_noise(x, &eps, beta)
    }

    pub fn elbo_with_noise(&self, x: &Tensor, eps: &Tensor, beta: f64) -> Result<ElboEstimate, VaeError> {
        self.check_dim(x)?;
        if !(beta > 0.0) {
            return Err(VaeError::Beta(beta));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let t = self.terms(&mut g, &p, xv, eps)?;
        let recon = g.mean(t.recon)?;
        let kl = g.mean(t.kl)?;
        let (recon, kl) = (g.value(recon).data()[0], g.value(kl).data()[0]);
        Ok(ElboEstimate {
            elbo: recon - beta * kl,
            recon,
            kl,
        })
    }

    /// Single-sample Monte Carlo ELBO `log p(x|z) + log p(z) - log q(z|x)`.
    pub fn mc_elbo_with_noise(&self, x: &Tensor, eps: &Tensor) -> Result<f64, VaeError> {
        self.iwae_with_noise(x, std::slice::from_ref(eps))
    }

    pub fn iwae_bound<R: Rng + ?Sized>(&self, x: &Tensor, k: usize, rng: &mut R) -> Result<f64, VaeError> {
        self.check_dim(x)?;
        if k == 0 {
            return Err(VaeError::ImportanceSamples);
        }
        let eps: Vec<Tensor> = (0..k).map(|_| standard_normal(x.rows(), self.spec.latent, rng)).collect();
        self.iwae_with_noise(x, &eps)
    }

    pub fn iwae_with_noise(&self, x: &Tensor, eps: &[Tensor]) -> Result<f64, VaeError> {
        self.check_dim(x)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let b = self.iwae_graph(&mut g, &p, xv, eps)?;
        Ok(g.value(b).data()[0])
    }

    /// Per-row importance-weighted bound, used as the held-out
    /// log-likelihood estimate.
    pub fn iwae_per_row<R: Rng + ?Sized>(&self, x: &Tensor, k: usize, rng: &mut R) -> Result<Vec<f64>, VaeError> {
        self.check_dim(x)?;
        if k == 0 {
            return Err(VaeError::ImportanceSamples);
        }
        let mut lw = Vec::with_capacity(k);
        for _ in 0..k {
            let eps = standard_normal(x.rows(), self.spec.latent, rng);
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            let t = self.terms(&mut g, &p, xv, &eps)?;
            lw.push(g.value(t.log_weight).data().to_vec());
        }
        Ok((0..x.rows())
            .map(|r| {
                let m = lw.iter().map(|w| w[r]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = lw.iter().map(|w| (w[r] - m).exp()).sum();
                m + s.ln() - (k as f64).ln()
            })
            .collect())
    }

    /// `n` points decoded from prior draws, following the spec's
    /// [`SampleMode`].
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor, VaeError> {
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.spec.dim]));
        }
        let z = standard_normal(n, self.spec.latent, rng);
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.constant(z);
        let (mu, lv) = self.decode(&mut g, &p, zv)?;
        let mut out = g.value(mu).clone();
        if self.spec.sample_mode == SampleMode::Draw {
            let lv = g.value(lv).clone();
            for (o, l) in out.data_mut().iter_mut().zip(lv.data()) {
                let e: f64 = rng.sample(StandardNormal);
                *o += (0.5 * l).exp() * e;
            }
        }
        Ok(out)
    }
}

//! A trainable generative model of either family behind one type.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::flows::{FlowError, FlowModel, FlowSpec};
use crate::nn::ParamSet;
use crate::vae::{VaeError, VaeModel, VaeSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelSpec {
    Flow(FlowSpec),
    Vae(VaeSpec),
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Flow(s) => s.dim,
            ModelSpec::Vae(s) => s.dim,
        }
    }

    /// Checkpoint kind tag.
    pub fn kind_tag(&self) -> &'static str {
        match self {
            ModelSpec::Flow(_) => "flow",
            ModelSpec::Vae(_) => "vae",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Flow(FlowModel),
    Vae(VaeModel),
}

/// Held-out log-likelihood per row; `exact` is false for VAE bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLikelihood {
    pub values: Vec<f64>,
    pub exact: bool,
}

impl Model {
    pub fn new<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<Self, ModelError> {
        Ok(match spec {
            ModelSpec::Flow(s) => Model::Flow(FlowModel::new(s.clone(), rng)?),
            ModelSpec::Vae(s) => Model::Vae(VaeModel::new(s.clone(), rng)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Flow(f) => ModelSpec::Flow(f.spec().clone()),
            Model::Vae(v) => ModelSpec::Vae(v.spec().clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Flow(f) => f.dim(),
            Model::Vae(v) => v.dim(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Flow(f) => f.params(),
            Model::Vae(v) => v.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Flow(f) => f.params_mut(),
            Model::Vae(v) => v.params_mut(),
        }
    }

    pub fn set_training(&mut self, training: bool) {
        if let Model::Flow(f) = self {
            f.set_training(training);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor, ModelError> {
        Ok(match self {
            Model::Flow(f) => f.sample(n, rng)?,
            Model::Vae(v) => v.sample(n, rng)?,
        })
    }

    /// Exact log-density for flows, `k`-sample importance-weighted bound
    /// for VAEs.
    pub fn log_likelihood<R: Rng + ?Sized>(&self, x: &Tensor, k: usize, rng: &mut R) -> Result<LogLikelihood, ModelError> {
        Ok(match self {
            Model::Flow(f) => LogLikelihood {
                values: f.log_prob(x)?,
                exact: true,
            },
            Model::Vae(v) => LogLikelihood {
                values: v.iwae_per_row(x, k, rng)?,
                exact: false,
            },
        })
    }

    pub fn as_flow(&self) -> Option<&FlowModel> {
        match self {
            Model::Flow(f) => Some(f),
            Model::Vae(_) => None,
        }
    }
}

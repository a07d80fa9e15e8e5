//! Data corruption operators used while annealing: variance-preserving
//! Gaussian noise and heat-equation blurring in the DCT domain.

mod blur;

pub use blur::{attenuation, blur_mollify, blur_spectrum, dct2_forward, dct2_inverse, dct_matrix, ImageGrid};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MollifyError {
    #[error("invalid mollification parameter: {0}")]
    Parameter(String),
    #[error("unsupported grid shape {height}x{width}: blurring needs a square grid")]
    UnsupportedShape { height: usize, width: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Tolerance on `alpha^2 + sigma^2 = 1`.
pub const VARIANCE_PRESERVING_TOL: f64 = 1e-12;

/// Returns `alpha * x + sigma * eps` with fresh standard-normal `eps` per
/// element.
///
/// With `sigma == 0` the input is returned unchanged and no random numbers
/// are drawn.
pub fn gaussian_mollify<R: Rng + ?Sized>(x: &Tensor, alpha: f64, sigma: f64, rng: &mut R) -> Result<Tensor, MollifyError> {
    if !(alpha >= 0.0) || !(sigma >= 0.0) {
        return Err(MollifyError::Parameter(format!(
            "alpha and sigma must be non-negative, got ({alpha}, {sigma})"
        )));
    }
    if (alpha * alpha + sigma * sigma - 1.0).abs() > VARIANCE_PRESERVING_TOL {
        return Err(MollifyError::Parameter(format!(
            "alpha^2 + sigma^2 must equal 1, got {}",
            alpha * alpha + sigma * sigma
        )));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        let eps: f64 = rng.sample(StandardNormal);
        *v = alpha * *v + sigma * eps;
    }
    Ok(out)
}

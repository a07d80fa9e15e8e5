//! Noise schedules mapping training progress `r = t / T` to a mollification
//! variance, plus the variance-preserving `(alpha, sigma)` pair and SNR.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule position {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid schedule parameter: {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Sigmoid,
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Self::Sigmoid),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(ScheduleError::Parameter(format!(
                "unknown schedule kind `{other}` (expected sigmoid, linear or cosine)"
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sigmoid => "sigmoid",
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Schedule kind and hyperparameters.
///
/// `tau`, `start` and `end` only affect the sigmoid schedule; `ns` and `ds`
/// only the cosine one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MollificationSchedule {
    pub kind: ScheduleKind,
    pub tau: f64,
    pub start: f64,
    pub end: f64,
    pub ns: f64,
    pub ds: f64,
    pub clip_min: f64,
}

impl Default for MollificationSchedule {
    fn default() -> Self {
        Self::sigmoid(0.7)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MollificationSchedule {
    pub fn sigmoid(tau: f64) -> Self {
        Self {
            kind: ScheduleKind::Sigmoid,
            tau,
            start: 0.0,
            end: 3.0,
            ns: 0.0002,
            ds: 0.00025,
            clip_min: 1e-9,
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            ..Self::default()
        }
    }

    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |msg: &str| Err(ScheduleError::Parameter(msg.to_string()));
        if !(self.clip_min > 0.0) {
            return bad("clip_min must be positive");
        }
        match self.kind {
            ScheduleKind::Sigmoid => {
                if !(self.tau > 0.0) {
                    return bad("tau must be positive");
                }
                if !(self.end > self.start) {
                    return bad("sigmoid schedule needs end > start");
                }
            }
            ScheduleKind::Cosine => {
                if !(self.ds > -1.0) || !self.ns.is_finite() {
                    return bad("cosine offsets must be finite with ds > -1");
                }
            }
            ScheduleKind::Linear => {}
        }
        Ok(())
    }

    /// Formula value before clamping.
    fn raw(&self, r: f64) -> f64 {
        match self.kind {
            ScheduleKind::Sigmoid => {
                let v_start = sigmoid(self.start / self.tau);
                let v_end = sigmoid(self.end / self.tau);
                (v_end - sigmoid((r * (self.end - self.start) + self.start) / self.tau)) / (v_end - v_start)
            }
            ScheduleKind::Linear => 1.0 - r,
            ScheduleKind::Cosine => {
                let c = (((r + self.ns) / (1.0 + self.ds)) * std::f64::consts::FRAC_PI_2).cos();
                c * c
            }
        }
    }

    /// Mollification variance `sigma^2` at progress `r`.
    ///
    /// The value is clamped to `[0, 1]` and anything below `clip_min` is
    /// reported as exactly zero.
    pub fn gamma(&self, r: f64) -> Result<f64, ScheduleError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(ScheduleError::OutOfRange(r));
        }
        let v = self.raw(r).clamp(0.0, 1.0);
        Ok(if v < self.clip_min { 0.0 } else { v })
    }

    /// Variance-preserving pair: `sigma = sqrt(gamma)`, `alpha = sqrt(1 - gamma)`.
    pub fn alpha_sigma(&self, r: f64) -> Result<(f64, f64), ScheduleError> {
        let var = self.gamma(r)?;
        Ok(((1.0 - var).sqrt(), var.sqrt()))
    }

    /// `alpha^2 / sigma^2`; `f64::INFINITY` once the noise variance is zero.
    pub fn snr(&self, r: f64) -> Result<f64, ScheduleError> {
        let var = self.gamma(r)?;
        Ok(if var == 0.0 { f64::INFINITY } else { (1.0 - var) / var })
    }
}

/// Log-spaced blurring times from `sigma_b_max^2 / 2` down to `0.5^2 / 2`.
///
/// Returns `steps + 1` strictly decreasing values; both endpoints are exact.
pub fn blur_times(sigma_b_max: f64, steps: usize) -> Result<Vec<f64>, ScheduleError> {
    if !(sigma_b_max > 0.5) || !sigma_b_max.is_finite() {
        return Err(ScheduleError::Parameter(format!(
            "sigma_b_max must exceed 0.5, got {sigma_b_max}"
        )));
    }
    if steps == 0 {
        return Err(ScheduleError::Parameter("blur schedule needs at least one step".into()));
    }
    let t0 = sigma_b_max * sigma_b_max / 2.0;
    let t_end = 0.5f64 * 0.5 / 2.0;
    let (l0, l1) = (t0.ln(), t_end.ln());
    let mut times: Vec<f64> = (0..=steps)
        .map(|k| (l0 + (l1 - l0) * k as f64 / steps as f64).exp())
        .collect();
    times[0] = t0;
    times[steps] = t_end;
    Ok(times)
}

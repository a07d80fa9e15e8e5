//! Minibatch training with annealed Gaussian mollification.
//!
//! Each iteration draws a minibatch, optionally replaces it with
//! `alpha * x + sigma * eps` where `sigma^2` follows the schedule, takes a
//! gradient step on the negative log-likelihood (flows) or negative bound
//! (VAEs) and periodically evaluates the model.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::checkpoint::{self, CheckpointError};
use crate::datasets::Dataset;
use crate::evalmetrics::{avg_test_loglik, mmd2_rbf, EvalError, MetricRecord};
use crate::model::{Model, ModelError};
use crate::mollify::{gaussian_mollify, MollifyError};
use crate::nn::ParamSet;
use crate::rng::{stream, Stream};
use crate::schedules::{MollificationSchedule, ScheduleError};
use crate::vae::{standard_normal, VaeError};

pub const DEFAULT_CLIP_NORM: f64 = 100.0;
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: u64,
        reason: String,
        /// Checkpoint written at the last successful evaluation, if any.
        last_good: Option<PathBuf>,
    },
    #[error("optimizer state does not match parameter `{0}`")]
    ShapeMismatch(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Mollify(#[from] MollifyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored in `params`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, lr: f64) -> Result<(), TrainError> {
    if state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!("{} buffers for {} parameters", state.m.len(), params.len())));
    }
    for ((p, m), v) in params.iter().zip(&state.m).zip(&state.v) {
        if p.value.shape() != m.shape() || p.value.shape() != v.shape() {
            return Err(TrainError::ShapeMismatch(p.name.clone()));
        }
    }
    state.step += 1;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            md[i] = beta1 * md[i] + (1.0 - beta1) * g;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Duration {
    Iterations(u64),
    /// `ceil(N / batch)` minibatches per epoch.
    Epochs(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VaeObjective {
    Elbo { beta: f64 },
    Iwae { k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub duration: Duration,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamHyper,
    /// `None` trains on clean data (vanilla).
    pub schedule: Option<MollificationSchedule>,
    /// Fraction of training during which data is mollified.
    pub mollify_fraction: f64,
    pub log_every: u64,
    pub eval_every: u64,
    /// Model samples for intermediate MMD evaluations.
    pub eval_samples: usize,
    /// Model samples for the final MMD evaluation.
    pub final_eval_samples: usize,
    pub eval_mmd: bool,
    pub eval_loglik: bool,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub vae_objective: VaeObjective,
    /// Record elapsed milliseconds; when false `wall_ms` is always 0 so
    /// logs are byte-reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            duration: Duration::Iterations(1000),
            batch_size: 256,
            lr: 5e-4,
            adam: AdamHyper::default(),
            schedule: Some(MollificationSchedule::default()),
            mollify_fraction: 0.5,
            log_every: 100,
            eval_every: 1000,
            eval_samples: 2000,
            final_eval_samples: 10_000,
            eval_mmd: true,
            eval_loglik: true,
            seed: 0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            vae_objective: VaeObjective::Elbo { beta: 1.0 },
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_rows: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        match self.duration {
            Duration::Iterations(0) | Duration::Epochs(0) => return bad("training length must be at least 1".into()),
            _ => {}
        }
        if self.batch_size == 0 || self.batch_size > train_rows {
            return bad(format!("batch size {} must be in 1..={train_rows}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.mollify_fraction) {
            return bad(format!("mollify fraction {} outside [0, 1]", self.mollify_fraction));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.log_every == 0 || self.eval_every == 0 {
            return bad("log and eval intervals must be positive".into());
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        match self.vae_objective {
            VaeObjective::Elbo { beta } if !(beta > 0.0) => return bad(format!("beta {beta} must be positive")),
            VaeObjective::Iwae { k: 0 } => return bad("importance samples must be at least 1".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn total_iterations(&self, train_rows: usize) -> u64 {
        match self.duration {
            Duration::Iterations(t) => t,
            Duration::Epochs(e) => e * train_rows.div_ceil(self.batch_size) as u64,
        }
    }

    /// Noise variance used at iteration `t` (0-based) of `total`.
    pub fn sigma2_at(&self, t: u64, total: u64) -> Result<f64, TrainError> {
        Ok(self.alpha_sigma_at(t, total)?.map_or(0.0, |(_, s)| s * s))
    }

    fn alpha_sigma_at(&self, t: u64, total: u64) -> Result<Option<(f64, f64)>, TrainError> {
        let Some(schedule) = &self.schedule else {
            return Ok(None);
        };
        let horizon = self.mollify_fraction * total as f64;
        if (t as f64) >= horizon {
            return Ok(None);
        }
        Ok(Some(schedule.alpha_sigma(t as f64 / horizon)?))
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let log = dir.join("metrics.jsonl");
        fs::write(&log, "").map_err(io(&log))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    fn append(&self, record: &MetricRecord) -> Result<(), TrainError> {
        let path = self.metrics_path();
        let mut f = fs::OpenOptions::new().append(true).open(&path).map_err(io(&path))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(io(&path))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricRecord>,
    pub iterations: u64,
    pub final_mmd2: Option<f64>,
    pub final_test_ll: Option<f64>,
    /// Whether `final_test_ll` is exact or a lower bound.
    pub test_ll_exact: bool,
    pub runtime_ms: u64,
}

fn diverged(iteration: u64, reason: String, last_good: &Option<PathBuf>) -> TrainError {
    TrainError::Diverged {
        iteration,
        reason,
        last_good: last_good.clone(),
    }
}

/// One gradient step's loss; parameter gradients are accumulated into the
/// model's [`ParamSet`].
fn loss_and_grads(
    model: &mut Model,
    batch: &Tensor,
    config: &TrainConfig,
    reparam: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64, StepError> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let x = g.constant(batch.clone());
    let (loss, stats) = match model {
        Model::Flow(f) => {
            f.set_training(true);
            let fwd = f.log_prob_graph(&mut g, &p, x).map_err(|e| StepError(e.to_string()))?;
            let mean = g.mean(fwd.log_prob)?;
            (g.neg(mean)?, Some(fwd.batch_stats))
        }
        Model::Vae(v) => {
            let bound = match config.vae_objective {
                VaeObjective::Elbo { beta } => {
                    let eps = standard_normal(batch.rows(), v.latent(), reparam);
                    v.elbo_graph(&mut g, &p, x, &eps, beta)
                }
                VaeObjective::Iwae { k } => {
                    let eps: Vec<Tensor> = (0..k).map(|_| standard_normal(batch.rows(), v.latent(), reparam)).collect();
                    v.iwae_graph(&mut g, &p, x, &eps)
                }
            }
            .map_err(|e: VaeError| StepError(e.to_string()))?;
            (g.neg(bound)?, None)
        }
    };
    let value = g.value(loss).data()[0];
    if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
        return Err(StepError(format!("loss {value}")));
    }
    let grads = g.backward(loss)?;
    let params = model.params_mut();
    params.accumulate(&grads, &p);
    if let (Model::Flow(f), Some(stats)) = (model, stats) {
        f.update_running_stats(&stats);
        f.set_training(false);
    }
    Ok(value)
}

struct StepError(String);

impl From<AutodiffError> for StepError {
    fn from(e: AutodiffError) -> Self {
        StepError(e.to_string())
    }
}

/// Evaluates MMD and held-out log-likelihood as configured.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    samples: usize,
    config: &TrainConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Option<f64>, Option<f64>, bool), TrainError> {
    let mut mmd = None;
    if config.eval_mmd && samples >= 2 {
        let k = samples.min(dataset.test.rows());
        if k >= 2 {
            let s = model.sample(samples, rng)?;
            let reference = dataset.test.slice_rows(0, k);
            mmd = Some(mmd2_rbf(&s, &reference)?);
        }
    }
    let (mut ll, mut exact) = (None, true);
    if config.eval_loglik && dataset.test.rows() > 0 {
        let r = avg_test_loglik(model, &dataset.test, rng)?;
        ll = Some(r.value);
        exact = r.exact;
    }
    Ok((mmd, ll, exact))
}

/// Trains `model` in place on `dataset.train`.
///
/// Records the training loss every `log_every` iterations and evaluates
/// (and checkpoints, when `out` is given) every `eval_every` iterations and
/// after the last one.
pub fn train(config: &TrainConfig, dataset: &Dataset, model: &mut Model, out: Option<&RunDir>) -> Result<TrainOutcome, TrainError> {
    let n = dataset.train.rows();
    config.validate(n)?;
    if dataset.dim() != model.dim() {
        return Err(TrainError::Config(format!(
            "model dimension {} does not match data dimension {}",
            model.dim(),
            dataset.dim()
        )));
    }
    let total = config.total_iterations(n);
    let mut shuffle = stream(config.seed, Stream::Shuffle);
    let mut noise = stream(config.seed, Stream::Noise);
    let mut eval_rng = stream(config.seed, Stream::Eval);
    let mut reparam = stream(config.seed, Stream::Reparam);
    let mut adam = AdamState::new(model.params(), config.adam);
    let start = Instant::now();
    let wall = |s: &Instant| if config.wall_clock { s.elapsed().as_millis() as u64 } else { 0 };

    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    let mut records = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let (mut final_mmd2, mut final_ll, mut ll_exact) = (None, None, true);

    for t in 0..total {
        let iteration = t + 1;
        if pos >= n {
            order.shuffle(&mut shuffle);
            pos = 0;
        }
        let end = (pos + config.batch_size).min(n);
        let mut batch = dataset.train.select_rows(&order[pos..end]);
        pos = end;

        let mut sigma2 = 0.0;
        if let Some((alpha, sigma)) = config.alpha_sigma_at(t, total)? {
            batch = gaussian_mollify(&batch, alpha, sigma, &mut noise)?;
            sigma2 = sigma * sigma;
        }

        model.params_mut().zero_grad();
        let loss = loss_and_grads(model, &batch, config, &mut reparam).map_err(|e| diverged(iteration, e.0, &last_good))?;
        if let Some(max) = config.clip_norm {
            model.params_mut().clip_grad_norm(max);
        }
        adam_step(&mut adam, model.params_mut(), config.lr)?;
        if model.params().iter().any(|p| !p.value.all_finite()) {
            return Err(diverged(iteration, "non-finite parameters".into(), &last_good));
        }

        let is_last = iteration == total;
        let is_eval = iteration % config.eval_every == 0 || is_last;
        if !(is_eval || iteration % config.log_every == 0) {
            continue;
        }
        let mut record = MetricRecord {
            iteration,
            wall_ms: 0,
            train_loss: loss,
            mmd2: None,
            test_ll: None,
            schedule_sigma2: sigma2,
        };
        if is_eval {
            let samples = if is_last { config.final_eval_samples } else { config.eval_samples };
            let (mmd, ll, exact) =
                evaluate(model, dataset, samples, config, &mut eval_rng).map_err(|e| match e {
                    TrainError::Model(m) => diverged(iteration, format!("evaluation failed: {m}"), &last_good),
                    TrainError::Eval(m) => diverged(iteration, format!("evaluation failed: {m}"), &last_good),
                    other => other,
                })?;
            record.mmd2 = mmd;
            record.test_ll = ll;
            if is_last {
                (final_mmd2, final_ll, ll_exact) = (mmd, ll, exact);
            }
            if let Some(dir) = out {
                checkpoint::save(model, &dir.checkpoint_path())?;
                last_good = Some(dir.checkpoint_path());
            }
        }
        record.wall_ms = wall(&start);
        if let Some(dir) = out {
            dir.append(&record)?;
        }
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        iterations: total,
        final_mmd2,
        final_test_ll: final_ll,
        test_ll_exact: ll_exact,
        runtime_ms: wall(&start),
    })
}

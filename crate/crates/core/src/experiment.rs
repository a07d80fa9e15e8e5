//! Named experiment recipes, the `key = value` config overlay and paired
//! vanilla/mollified runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::datasets::{load_csv_dropping, toy_dataset, Dataset, DatasetError, ToyKind, TOY_SPLIT_SIZE};
use crate::flows::{FlowKind, FlowSpec};
use crate::model::{Model, ModelSpec};
use crate::rng::{stream, Stream};
use crate::schedules::{MollificationSchedule, ScheduleKind};
use crate::trainer::{train, Duration, RunDir, TrainConfig, TrainError, TrainOutcome, VaeObjective};
use crate::vae::{SampleMode, VaeSpec};

pub const RECIPES: &[&str] = &[
    "toy-gmm",
    "toy-vonmises",
    "uci-red-wine",
    "uci-white-wine",
    "uci-parkinsons",
    "uci-miniboone",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown recipe `{name}`; available: {}", RECIPES.join(", "))]
    UnknownRecipe { name: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy(ToyKind),
    Csv(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    RealNvp,
    Maf,
    Vae,
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "realnvp" => Ok(ModelKind::RealNvp),
            "maf" => Ok(ModelKind::Maf),
            "vae" => Ok(ModelKind::Vae),
            _ => Err("expected realnvp, maf or vae".into()),
        }
    }
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::RealNvp => "realnvp",
            ModelKind::Maf => "maf",
            ModelKind::Vae => "vae",
        }
    }
}

/// Everything needed to run one paired experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub recipe: String,
    pub data: DataSource,
    /// Columns removed from CSV data before splitting.
    pub drop_columns: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub von_mises_mu: f64,
    pub split_seed: Option<u64>,
    pub model_kind: ModelKind,
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub latent: usize,
    pub sample_mode: SampleMode,
    /// Schedule of the mollified run.
    pub schedule: MollificationSchedule,
    pub train: TrainConfig,
}

fn toy(recipe: &str, kind: ToyKind) -> ExperimentConfig {
    ExperimentConfig {
        recipe: recipe.to_string(),
        data: DataSource::Toy(kind),
        drop_columns: Vec::new(),
        n_train: TOY_SPLIT_SIZE,
        n_test: TOY_SPLIT_SIZE,
        von_mises_mu: 0.0,
        split_seed: None,
        model_kind: ModelKind::RealNvp,
        layers: 5,
        hidden: vec![64, 64],
        batchnorm: false,
        latent: 2,
        sample_mode: SampleMode::Mean,
        schedule: MollificationSchedule::sigmoid(0.7),
        train: TrainConfig {
            duration: Duration::Iterations(20_000),
            batch_size: 256,
            lr: 5e-4,
            mollify_fraction: 0.5,
            log_every: 100,
            eval_every: 2000,
            eval_samples: 2000,
            final_eval_samples: 10_000,
            eval_mmd: true,
            eval_loglik: true,
            ..TrainConfig::default()
        },
    }
}

fn uci(recipe: &str, file: &str, drop: &[&str]) -> ExperimentConfig {
    ExperimentConfig {
        recipe: recipe.to_string(),
        data: DataSource::Csv(PathBuf::from("data/uci").join(file)),
        drop_columns: drop.iter().map(|s| s.to_string()).collect(),
        n_train: 0,
        n_test: 0,
        von_mises_mu: 0.0,
        split_seed: None,
        model_kind: ModelKind::Maf,
        layers: 5,
        hidden: vec![512],
        batchnorm: true,
        latent: 8,
        sample_mode: SampleMode::Mean,
        schedule: MollificationSchedule::sigmoid(0.7),
        train: TrainConfig {
            duration: Duration::Epochs(150),
            batch_size: 100,
            lr: 1e-4,
            mollify_fraction: 1.0,
            log_every: 100,
            eval_every: 500,
            eval_samples: 0,
            final_eval_samples: 0,
            eval_mmd: false,
            eval_loglik: true,
            ..TrainConfig::default()
        },
    }
}

/// Default configuration of a registered recipe.
pub fn recipe(name: &str) -> Result<ExperimentConfig, ConfigError> {
    Ok(match name {
        "toy-gmm" => toy(name, ToyKind::TwoGaussians),
        "toy-vonmises" => toy(name, ToyKind::VonMises),
        "uci-red-wine" => uci(name, "red-wine.csv", &["quality"]),
        "uci-white-wine" => uci(name, "white-wine.csv", &["quality"]),
        "uci-parkinsons" => uci(name, "parkinsons.csv", &[]),
        "uci-miniboone" => uci(name, "miniboone.csv", &[]),
        _ => return Err(ConfigError::UnknownRecipe { name: name.into() }),
    })
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_optional_f64(key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one dotted key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "recipe" => {
                if value != self.recipe {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: "the recipe must be chosen before other keys".into(),
                    });
                }
            }
            "data.source" => {
                self.data = match value {
                    "two-gaussians" => DataSource::Toy(ToyKind::TwoGaussians),
                    "von-mises" => DataSource::Toy(ToyKind::VonMises),
                    path => DataSource::Csv(PathBuf::from(path)),
                }
            }
            "data.drop" => {
                self.drop_columns = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "data.n_train" => self.n_train = parse(key, value)?,
            "data.n_test" => self.n_test = parse(key, value)?,
            "data.von_mises_mu" => self.von_mises_mu = parse(key, value)?,
            "data.split_seed" => self.split_seed = Some(parse(key, value)?),
            "model.kind" => self.model_kind = parse(key, value)?,
            "model.layers" => self.layers = parse(key, value)?,
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "model.batchnorm" => self.batchnorm = parse(key, value)?,
            "model.latent" => self.latent = parse(key, value)?,
            "model.sample_mode" => {
                self.sample_mode = match value {
                    "mean" => SampleMode::Mean,
                    "draw" => SampleMode::Draw,
                    _ => return Err(bad(key, value, "expected mean or draw")),
                }
            }
            "schedule.kind" => self.schedule.kind = parse::<ScheduleKind>(key, value)?,
            "schedule.tau" => self.schedule.tau = parse(key, value)?,
            "schedule.start" => self.schedule.start = parse(key, value)?,
            "schedule.end" => self.schedule.end = parse(key, value)?,
            "schedule.ns" => self.schedule.ns = parse(key, value)?,
            "schedule.ds" => self.schedule.ds = parse(key, value)?,
            "schedule.clip_min" => self.schedule.clip_min = parse(key, value)?,
            "mollify.fraction" => t.mollify_fraction = parse(key, value)?,
            "train.iterations" => t.duration = Duration::Iterations(parse(key, value)?),
            "train.epochs" => t.duration = Duration::Epochs(parse(key, value)?),
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.adam.beta1 = parse(key, value)?,
            "train.beta2" => t.adam.beta2 = parse(key, value)?,
            "train.eps" => t.adam.eps = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse_optional_f64(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "eval.every" => t.eval_every = parse(key, value)?,
            "eval.log_every" => t.log_every = parse(key, value)?,
            "eval.samples" => t.eval_samples = parse(key, value)?,
            "eval.final_samples" => t.final_eval_samples = parse(key, value)?,
            "eval.mmd" => t.eval_mmd = parse(key, value)?,
            "eval.loglik" => t.eval_loglik = parse(key, value)?,
            "vae.objective" => {
                t.vae_objective = match value {
                    "elbo" => VaeObjective::Elbo { beta: 1.0 },
                    "iwae" => VaeObjective::Iwae { k: 5 },
                    _ => return Err(bad(key, value, "expected elbo or iwae")),
                }
            }
            "vae.beta" => match &mut t.vae_objective {
                VaeObjective::Elbo { beta } => *beta = parse(key, value)?,
                VaeObjective::Iwae { .. } => return Err(bad(key, value, "beta applies to the elbo objective")),
            },
            "vae.k" => match &mut t.vae_objective {
                VaeObjective::Iwae { k } => *k = parse(key, value)?,
                VaeObjective::Elbo { .. } => return Err(bad(key, value, "k applies to the iwae objective")),
            },
            "log.wall_clock" => t.wall_clock = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Builds a config from overlay text. The base is `recipe` if given,
    /// else the file's own `recipe` key, else `toy-gmm`.
    pub fn from_overlay(text: &str, recipe_name: Option<&str>) -> Result<Self, ConfigError> {
        let pairs = parse_overlay(text)?;
        let file_recipe = pairs.iter().find(|(k, _)| k == "recipe").map(|(_, v)| v.as_str());
        let mut cfg = recipe(recipe_name.or(file_recipe).unwrap_or("toy-gmm"))?;
        for (k, v) in &pairs {
            if k == "recipe" {
                continue;
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Full overlay text reproducing this configuration.
    pub fn to_overlay(&self) -> String {
        let t = &self.train;
        let s = &self.schedule;
        let mut o = String::new();
        let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").unwrap();
        kv("recipe", self.recipe.clone());
        kv(
            "data.source",
            match &self.data {
                DataSource::Toy(ToyKind::TwoGaussians) => "two-gaussians".into(),
                DataSource::Toy(ToyKind::VonMises) => "von-mises".into(),
                DataSource::Csv(p) => p.display().to_string(),
            },
        );
        kv("data.drop", self.drop_columns.join(","));
        kv("data.n_train", self.n_train.to_string());
        kv("data.n_test", self.n_test.to_string());
        kv("data.von_mises_mu", self.von_mises_mu.to_string());
        if let Some(seed) = self.split_seed {
            kv("data.split_seed", seed.to_string());
        }
        kv("model.kind", self.model_kind.name().into());
        kv("model.layers", self.layers.to_string());
        kv("model.hidden", join(&self.hidden));
        kv("model.batchnorm", self.batchnorm.to_string());
        kv("model.latent", self.latent.to_string());
        kv(
            "model.sample_mode",
            match self.sample_mode {
                SampleMode::Mean => "mean".into(),
                SampleMode::Draw => "draw".into(),
            },
        );
        kv("schedule.kind", s.kind.to_string());
        kv("schedule.tau", s.tau.to_string());
        kv("schedule.start", s.start.to_string());
        kv("schedule.end", s.end.to_string());
        kv("schedule.ns", s.ns.to_string());
        kv("schedule.ds", s.ds.to_string());
        kv("schedule.clip_min", s.clip_min.to_string());
        kv("mollify.fraction", t.mollify_fraction.to_string());
        match t.duration {
            Duration::Iterations(n) => kv("train.iterations", n.to_string()),
            Duration::Epochs(n) => kv("train.epochs", n.to_string()),
        }
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.eps", t.adam.eps.to_string());
        kv("train.clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("train.seed", t.seed.to_string());
        kv("eval.every", t.eval_every.to_string());
        kv("eval.log_every", t.log_every.to_string());
        kv("eval.samples", t.eval_samples.to_string());
        kv("eval.final_samples", t.final_eval_samples.to_string());
        kv("eval.mmd", t.eval_mmd.to_string());
        kv("eval.loglik", t.eval_loglik.to_string());
        match t.vae_objective {
            VaeObjective::Elbo { beta } => {
                kv("vae.objective", "elbo".into());
                kv("vae.beta", beta.to_string());
            }
            VaeObjective::Iwae { k } => {
                kv("vae.objective", "iwae".into());
                kv("vae.k", k.to_string());
            }
        }
        kv("log.wall_clock", t.wall_clock.to_string());
        o
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn load_dataset(&self) -> Result<Dataset, ExperimentError> {
        let seed = self.split_seed.unwrap_or(self.train.seed);
        Ok(match &self.data {
            DataSource::Toy(kind) => {
                let mut rng = stream(seed, Stream::Data);
                toy_dataset(*kind, self.n_train, self.n_test, self.von_mises_mu, &mut rng)
            }
            DataSource::Csv(path) => {
                let drop: Vec<&str> = self.drop_columns.iter().map(String::as_str).collect();
                load_csv_dropping(path, seed, &drop)?
            }
        })
    }

    pub fn model_spec(&self, dim: usize) -> ModelSpec {
        match self.model_kind {
            ModelKind::Vae => ModelSpec::Vae(VaeSpec {
                dim,
                latent: self.latent,
                hidden: self.hidden.clone(),
                sample_mode: self.sample_mode,
            }),
            kind => ModelSpec::Flow(FlowSpec {
                kind: if kind == ModelKind::Maf { FlowKind::Maf } else { FlowKind::RealNvp },
                dim,
                layers: self.layers,
                hidden: self.hidden.clone(),
                batchnorm: self.batchnorm,
            }),
        }
    }

    /// Training config of the vanilla (`mollified == false`) or mollified run.
    pub fn run_config(&self, mollified: bool) -> TrainConfig {
        TrainConfig {
            schedule: mollified.then_some(self.schedule),
            ..self.train.clone()
        }
    }
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_overlay(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Which runs of a pair to execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunSelection {
    Both,
    VanillaOnly,
    MollifiedOnly,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub final_mmd2: Option<f64>,
    /// `final_mmd2` multiplied by 1e4.
    pub final_mmd2_x1e4: Option<f64>,
    pub final_test_ll: Option<f64>,
    pub test_ll_is_bound: bool,
    pub runtime_ms: u64,
    pub iterations: u64,
    pub diverged: Option<DivergenceInfo>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DivergenceInfo {
    pub iteration: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub recipe: String,
    pub seed: u64,
    pub dim: usize,
    pub vanilla: Option<RunSummary>,
    pub mollified: Option<RunSummary>,
    /// `vanilla.final_mmd2 / mollified.final_mmd2`.
    pub mmd2_ratio: Option<f64>,
    /// `mollified.final_test_ll - vanilla.final_test_ll`.
    pub test_ll_gain: Option<f64>,
}

impl ExperimentSummary {
    pub fn any_diverged(&self) -> bool {
        [&self.vanilla, &self.mollified]
            .iter()
            .any(|r| r.as_ref().is_some_and(|r| r.diverged.is_some()))
    }
}

fn summarize(result: Result<TrainOutcome, TrainError>) -> Result<RunSummary, ExperimentError> {
    match result {
        Ok(o) => Ok(RunSummary {
            final_mmd2: o.final_mmd2,
            final_mmd2_x1e4: o.final_mmd2.map(|m| m * crate::evalmetrics::MMD_REPORT_SCALE),
            final_test_ll: o.final_test_ll,
            test_ll_is_bound: !o.test_ll_exact,
            runtime_ms: o.runtime_ms,
            iterations: o.iterations,
            diverged: None,
        }),
        Err(TrainError::Diverged { iteration, reason, .. }) => Ok(RunSummary {
            final_mmd2: None,
            final_mmd2_x1e4: None,
            final_test_ll: None,
            test_ll_is_bound: false,
            runtime_ms: 0,
            iterations: iteration,
            diverged: Some(DivergenceInfo { iteration, reason }),
        }),
        Err(e) => Err(e.into()),
    }
}

/// Outcome of one run inside a pair, with the trained model.
pub struct RunResult {
    pub outcome: Result<TrainOutcome, TrainError>,
    pub model: Model,
}

/// Trains one run of the pair. Both runs of a pair start from the same
/// initialization and see the same data order.
pub fn run_single(cfg: &ExperimentConfig, dataset: &Dataset, mollified: bool, out: Option<&Path>) -> Result<RunResult, ExperimentError> {
    let spec = cfg.model_spec(dataset.dim());
    let mut model = Model::new(&spec, &mut stream(cfg.seed(), Stream::Init)).map_err(TrainError::from)?;
    let train_cfg = cfg.run_config(mollified);
    let dir = match out {
        Some(d) => {
            let dir = RunDir::create(d)?;
            write_file(&d.join("config.snapshot"), &cfg_snapshot(cfg, mollified))?;
            Some(dir)
        }
        None => None,
    };
    let outcome = train(&train_cfg, dataset, &mut model, dir.as_ref());
    Ok(RunResult { outcome, model })
}

fn cfg_snapshot(cfg: &ExperimentConfig, mollified: bool) -> String {
    let mut text = format!("# {} run\n", if mollified { "mollified" } else { "vanilla" });
    text.push_str(&cfg.to_overlay());
    if !mollified {
        text.push_str("# the vanilla run ignores the schedule keys\n");
    }
    text
}

fn write_file(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs the selected runs of `cfg` into `out_dir/{vanilla,mollified}` and
/// writes `out_dir/summary.json`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, which: RunSelection) -> Result<ExperimentSummary, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(|source| ExperimentError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let dataset = cfg.load_dataset()?;
    let mut summary = ExperimentSummary {
        recipe: cfg.recipe.clone(),
        seed: cfg.seed(),
        dim: dataset.dim(),
        vanilla: None,
        mollified: None,
        mmd2_ratio: None,
        test_ll_gain: None,
    };
    if which != RunSelection::MollifiedOnly {
        let r = run_single(cfg, &dataset, false, Some(&out_dir.join("vanilla")))?;
        summary.vanilla = Some(summarize(r.outcome)?);
    }
    if which != RunSelection::VanillaOnly {
        let r = run_single(cfg, &dataset, true, Some(&out_dir.join("mollified")))?;
        summary.mollified = Some(summarize(r.outcome)?);
    }
    if let (Some(v), Some(m)) = (&summary.vanilla, &summary.mollified) {
        if let (Some(a), Some(b)) = (v.final_mmd2, m.final_mmd2) {
            summary.mmd2_ratio = Some(a / b);
        }
        if let (Some(a), Some(b)) = (v.final_test_ll, m.final_test_ll) {
            summary.test_ll_gain = Some(b - a);
        }
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&out_dir.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

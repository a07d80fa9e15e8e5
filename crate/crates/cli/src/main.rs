//! `mollify`: train, evaluate and inspect mollified density models.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numeric divergence,
//! 3 I/O error.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mollify_core::checkpoint::{self, CheckpointError};
use mollify_core::datasets::{Dataset, DatasetError};
use mollify_core::evalmetrics::{self, avg_test_loglik, mmd2_rbf, EvalError, Grid, MMD_REPORT_SCALE};
use mollify_core::experiment::{recipe, run_experiment, ExperimentConfig, ExperimentError, RunSelection};
use mollify_core::mollify::{blur_mollify, ImageGrid};
use mollify_core::rng::{stream, Stream};
use mollify_core::schedules::{blur_times, MollificationSchedule, ScheduleKind};
use mollify_core::trainer::TrainError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mollify", version, about = "Density models trained with annealed data mollification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a vanilla/mollified pair from a recipe or config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Print a noise schedule as a table of r, gamma(r) and SNR.
    Schedule(ScheduleArgs),
    /// Blur a square matrix at log-spaced heat-equation times.
    BlurDemo(BlurArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Export density and score grids of a 2-D flow checkpoint.
    Grids(GridArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Registered recipe (toy-gmm, toy-vonmises, uci-red-wine, ...).
    #[arg(long)]
    recipe: Option<String>,
    /// Config overlay file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Seed for data, initialization, shuffling and noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Run only the vanilla (clean data) run.
    #[arg(long, conflicts_with = "mollify")]
    vanilla: bool,
    /// Run only the mollified run.
    #[arg(long)]
    mollify: bool,
    /// Schedule kind of the mollified run: sigmoid, linear or cosine.
    #[arg(long, conflicts_with = "vanilla")]
    schedule: Option<String>,
    /// Sigmoid schedule temperature.
    #[arg(long, conflicts_with = "vanilla")]
    tau: Option<f64>,
    /// Fraction of training with mollified data.
    #[arg(long)]
    mollify_fraction: Option<f64>,
    /// Extra `key=value` config overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Record 0 instead of elapsed time so outputs are byte-reproducible.
    #[arg(long)]
    no_wall_clock: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Recipe name (its data settings are used) or `csv:PATH`.
    #[arg(long)]
    data: String,
    /// Metrics to compute.
    #[arg(long, default_value = "both", value_parser = ["mmd2", "loglik", "both"])]
    metric: String,
    /// Model samples for MMD.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// Seed for data generation/splitting and model sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON result to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Schedule kind: sigmoid, linear or cosine.
    #[arg(long, default_value = "sigmoid")]
    kind: String,
    /// Sigmoid temperature.
    #[arg(long, default_value_t = 0.7)]
    tau: f64,
    /// Number of rows, r spaced uniformly on [0, 1].
    #[arg(long, default_value_t = 101)]
    points: usize,
}

#[derive(Args)]
struct BlurArgs {
    /// Square matrix file: rows of space-separated numbers.
    #[arg(long)]
    input: PathBuf,
    /// Largest blur scale; defaults to half the image width.
    #[arg(long, conflicts_with = "sigma2_b_max")]
    sigma_b_max: Option<f64>,
    /// Largest blur variance (alternative to --sigma-b-max).
    #[arg(long)]
    sigma2_b_max: Option<f64>,
    /// Number of schedule steps; steps + 1 files are written.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of samples.
    #[arg(short = 'n', default_value_t = 1000)]
    n: usize,
    /// Output points file.
    #[arg(long)]
    out: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Best-effort SVG scatter plot (2-D models only).
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Checkpoint file of a 2-D flow.
    #[arg(long)]
    ckpt: PathBuf,
    /// Grid bounds `lo,hi` applied to both axes.
    #[arg(long, default_value = "-4,4", allow_hyphen_values = true)]
    bounds: String,
    /// Cells per axis.
    #[arg(long, default_value_t = 100)]
    res: usize,
    /// Output directory (density.txt, score.txt).
    #[arg(long)]
    out: PathBuf,
    /// Also write a best-effort density.svg heat map.
    #[arg(long)]
    svg: bool,
}

/// Marks errors caused by bad flags or values (exit code 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return 2;
        }
        let is_io = cause.is::<std::io::Error>()
            || matches!(cause.downcast_ref::<CheckpointError>(), Some(CheckpointError::Io { .. }))
            || matches!(cause.downcast_ref::<DatasetError>(), Some(DatasetError::Io { .. }))
            || matches!(cause.downcast_ref::<EvalError>(), Some(EvalError::Io { .. }))
            || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Io { .. }))
            || matches!(cause.downcast_ref::<ExperimentError>(), Some(ExperimentError::Io { .. }));
        if is_io {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::BlurDemo(a) => cmd_blur_demo(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Grids(a) => cmd_grids(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn build_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            ExperimentConfig::from_overlay(&text, a.recipe.as_deref())?
        }
        None => {
            let name = a.recipe.as_deref().ok_or_else(|| usage("one of --recipe or --config is required"))?;
            recipe(name)?
        }
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(kind) = &a.schedule {
        cfg.schedule.kind = kind.parse::<ScheduleKind>().map_err(|e| usage(e.to_string()))?;
    }
    if let Some(tau) = a.tau {
        cfg.schedule.tau = tau;
    }
    if let Some(f) = a.mollify_fraction {
        cfg.train.mollify_fraction = f;
    }
    if a.no_wall_clock {
        cfg.train.wall_clock = false;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let cfg = build_config(&a)?;
    let which = match (a.vanilla, a.mollify) {
        (true, _) => RunSelection::VanillaOnly,
        (_, true) => RunSelection::MollifiedOnly,
        _ => RunSelection::Both,
    };
    let summary = run_experiment(&cfg, &a.out, which)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if summary.any_diverged() { 2 } else { 0 })
}

fn eval_dataset(spec: &str, seed: u64) -> Result<Dataset> {
    let mut cfg = match spec.strip_prefix("csv:") {
        Some(path) => {
            let mut c = recipe("uci-red-wine")?;
            c.set("data.source", path)?;
            c.set("data.drop", "")?;
            c
        }
        None => recipe(spec)?,
    };
    cfg.train.seed = seed;
    Ok(cfg.load_dataset()?)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let model = checkpoint::load(&a.ckpt)?;
    let data = eval_dataset(&a.data, a.seed)?;
    if data.dim() != model.dim() {
        bail!(usage(format!(
            "checkpoint has dimension {} but the data has {}",
            model.dim(),
            data.dim()
        )));
    }
    let mut rng = stream(a.seed, Stream::Eval);
    let mut out = serde_json::Map::new();
    if a.metric != "loglik" {
        let samples = model.sample(a.samples, &mut rng)?;
        let k = a.samples.min(data.test.rows());
        let m = mmd2_rbf(&samples, &data.test.slice_rows(0, k))?;
        out.insert("mmd2".into(), json!(m));
        out.insert("mmd2_x1e4".into(), json!(m * MMD_REPORT_SCALE));
        out.insert("samples".into(), json!(a.samples));
    }
    if a.metric != "mmd2" {
        let ll = avg_test_loglik(&model, &data.test, &mut rng)?;
        out.insert("test_ll".into(), json!(ll.value));
        out.insert("test_ll_is_bound".into(), json!(!ll.exact));
    }
    out.insert("test_rows".into(), json!(data.test.rows()));
    let text = serde_json::to_string_pretty(&out)?;
    println!("{text}");
    if let Some(path) = &a.out {
        write(path, &(text + "\n"))?;
    }
    Ok(0)
}

fn cmd_schedule(a: ScheduleArgs) -> Result<u8> {
    let kind: ScheduleKind = a.kind.parse().map_err(|e: mollify_core::schedules::ScheduleError| usage(e.to_string()))?;
    let schedule = match kind {
        ScheduleKind::Sigmoid => MollificationSchedule::sigmoid(a.tau),
        ScheduleKind::Linear => MollificationSchedule::linear(),
        ScheduleKind::Cosine => MollificationSchedule::cosine(),
    };
    schedule.validate().map_err(|e| usage(e.to_string()))?;
    if a.points < 2 {
        bail!(usage("--points must be at least 2"));
    }
    println!("# r gamma snr");
    for i in 0..a.points {
        let r = i as f64 / (a.points - 1) as f64;
        println!("{r} {} {}", schedule.gamma(r)?, schedule.snr(r)?);
    }
    Ok(0)
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        rows.push(row.map_err(|_| usage(format!("{}: line {} is not numeric", path.display(), i + 1)))?);
    }
    Ok(rows)
}

fn matrix_text(g: &ImageGrid, t: f64) -> String {
    let mut out = format!("# blur time {t} size {}x{}\n", g.height, g.width);
    for i in 0..g.height {
        let row: Vec<String> = (0..g.width).map(|j| format!("{:e}", g.get(0, i, j))).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn cmd_blur_demo(a: BlurArgs) -> Result<u8> {
    let rows = read_matrix(&a.input)?;
    let grid = ImageGrid::from_rows(&rows).map_err(|e| usage(e.to_string()))?;
    if grid.height != grid.width {
        bail!(usage(format!("blurring needs a square matrix, got {}x{}", grid.height, grid.width)));
    }
    if a.steps == 0 {
        bail!(usage("--steps must be at least 1"));
    }
    let sigma = match (a.sigma_b_max, a.sigma2_b_max) {
        (Some(s), _) => s,
        (None, Some(s2)) => s2.sqrt(),
        (None, None) => grid.width as f64 / 2.0,
    };
    let times = blur_times(sigma, a.steps).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let width = times.len().to_string().len().max(3);
    for (k, &t) in times.iter().enumerate() {
        let blurred = blur_mollify(&grid, t).map_err(|e| usage(e.to_string()))?;
        write(&a.out.join(format!("blur_{k:0width$}.txt")), &matrix_text(&blurred, t))?;
    }
    Ok(0)
}

fn cmd_sample(a: SampleArgs) -> Result<u8> {
    let model = checkpoint::load(&a.ckpt)?;
    let pts = model.sample(a.n, &mut stream(a.seed, Stream::Cli))?;
    write(&a.out, &evalmetrics::points_to_text(&pts))?;
    if let Some(path) = &a.svg {
        if pts.cols() != 2 {
            bail!(usage("SVG scatter plots need 2-D samples"));
        }
        write(path, &svg::scatter(&pts))?;
    }
    Ok(0)
}

fn cmd_grids(a: GridArgs) -> Result<u8> {
    let (lo, hi) = a
        .bounds
        .split_once(',')
        .and_then(|(l, h)| Some((l.trim().parse::<f64>().ok()?, h.trim().parse::<f64>().ok()?)))
        .ok_or_else(|| usage(format!("--bounds expects lo,hi, got `{}`", a.bounds)))?;
    let grid = Grid::new(lo, hi, a.res).map_err(|e| usage(e.to_string()))?;
    let model = checkpoint::load(&a.ckpt)?;
    let flow = model.as_flow().ok_or_else(|| usage("grids need a flow checkpoint"))?;
    let density = evalmetrics::export_density_grid(flow, &grid).map_err(|e| usage(e.to_string()))?;
    let score = evalmetrics::export_score_grid(flow, &grid)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write(&a.out.join("density.txt"), &density.to_text())?;
    write(&a.out.join("score.txt"), &score.to_text())?;
    if a.svg {
        write(&a.out.join("density.svg"), &svg::heatmap(&density))?;
    }
    Ok(0)
}

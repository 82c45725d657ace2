//! Experiment runner: configuration, dispatch over scenario and method, and
//! the CSV/JSON artifacts of each run.
//!
//! Artifacts of a run in `out_dir`:
//!
//! * `metrics.csv`: `iteration,elapsed_ms,L,R,combined` per optimizer iteration
//!   (epoch for α-SNODE); `L` and `R` are empty where a method does not track them.
//! * `summary.json`: see [`RunSummary`].
//! * `train_fit.csv`, `test_rollout.csv`: `time,sample,state,true,predicted`
//!   for the first sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::scenarios::{self, Dataset, SamplingMode, ScenarioConfig, ScenarioKind};
use crate::solvers::{self, SolverConfig};
use crate::spectral::CollocationGrid;
use crate::train::{self, Gradient, SpectralProblem, Termination, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    DeltaSnode,
    AlphaSnode,
    BkprEuler,
    BkprDopri5,
    AdjEuler,
    AdjDopri5,
}

impl MethodKind {
    pub const NAMES: [&'static str; 6] = ["delta_snode", "alpha_snode", "bkpr_euler", "bkpr_dopri5", "adj_euler", "adj_dopri5"];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::DeltaSnode => "delta_snode",
            MethodKind::AlphaSnode => "alpha_snode",
            MethodKind::BkprEuler => "bkpr_euler",
            MethodKind::BkprDopri5 => "bkpr_dopri5",
            MethodKind::AdjEuler => "adj_euler",
            MethodKind::AdjDopri5 => "adj_dopri5",
        }
    }

    pub fn is_spectral(&self) -> bool {
        matches!(self, MethodKind::DeltaSnode | MethodKind::AlphaSnode)
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| {
                [
                    MethodKind::DeltaSnode,
                    MethodKind::AlphaSnode,
                    MethodKind::BkprEuler,
                    MethodKind::BkprDopri5,
                    MethodKind::AdjEuler,
                    MethodKind::AdjDopri5,
                ][i]
            })
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; valid methods: {}", MethodKind::NAMES.join(", "))))
    }
}

/// Every knob of a run. Unset optional fields resolve to per-method or
/// per-scenario defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub method: MethodKind,
    pub data_fraction: f64,
    /// `None`: random subsets for spectral methods, even spacing otherwise.
    pub sampling: Option<SamplingMode>,
    pub order: usize,
    pub train: TrainConfig,
    pub max_iters: Option<usize>,
    pub tolerance: Option<f64>,
    pub rtol: f64,
    pub atol: f64,
    pub min_step: f64,
    pub max_steps: usize,
    /// `None`: the spacing of the full observation grid.
    pub euler_dt: Option<f64>,
    pub seed: u64,
    pub test_seed: Option<u64>,
    pub test_batch: Option<usize>,
    pub out_dir: PathBuf,
    /// Load training data from this file instead of simulating.
    pub data: Option<PathBuf>,
    /// Rayon threads; 0 uses the default pool size.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::new(ScenarioKind::Vehicle),
            method: MethodKind::DeltaSnode,
            data_fraction: 1.0,
            sampling: None,
            order: 14,
            train: TrainConfig::default(),
            max_iters: None,
            tolerance: None,
            rtol: 1e-7,
            atol: 1e-9,
            min_step: 1e-6,
            max_steps: 100_000,
            euler_dt: None,
            seed: 0,
            test_seed: None,
            test_batch: None,
            out_dir: PathBuf::from("runs/latest"),
            data: None,
            workers: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "auto" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 32] = [
        "scenario", "method", "data_fraction", "sampling", "p", "gamma", "adam_lr", "sgd_lr", "n_x", "n_t", "max_iters",
        "tolerance", "perturbation", "weighted", "rtol", "atol", "min_step", "max_steps", "euler_dt", "seed", "test_seed",
        "batch", "test_batch", "horizon", "n_points", "n_agents", "hidden", "harmonics", "period", "amplitude", "out_dir",
        "data",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "scenario" => self.scenario.kind = v.parse()?,
            "method" => self.method = v.parse()?,
            "data_fraction" => self.data_fraction = parse(key, v)?,
            "sampling" => self.sampling = if v == "auto" { None } else { Some(v.parse()?) },
            "p" => self.order = parse(key, v)?,
            "gamma" => self.train.gamma = parse(key, v)?,
            "adam_lr" => self.train.adam_lr = parse(key, v)?,
            "sgd_lr" => self.train.sgd_lr = parse(key, v)?,
            "n_x" => self.train.n_x = parse(key, v)?,
            "n_t" => self.train.n_t = parse(key, v)?,
            "max_iters" => self.max_iters = parse_opt(key, v)?,
            "tolerance" => self.tolerance = parse_opt(key, v)?,
            "perturbation" => self.train.perturbation = parse(key, v)?,
            "weighted" => self.train.weighted = parse(key, v)?,
            "rtol" => self.rtol = parse(key, v)?,
            "atol" => self.atol = parse(key, v)?,
            "min_step" => self.min_step = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "euler_dt" => self.euler_dt = parse_opt(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "test_seed" => self.test_seed = parse_opt(key, v)?,
            "batch" => self.scenario.batch = parse(key, v)?,
            "test_batch" => self.test_batch = parse_opt(key, v)?,
            "horizon" => self.scenario.horizon = parse(key, v)?,
            "n_points" => self.scenario.n_points = parse(key, v)?,
            "n_agents" => self.scenario.n_agents = parse(key, v)?,
            "hidden" => self.scenario.hidden = parse(key, v)?,
            "harmonics" => self.scenario.harmonics = parse(key, v)?,
            "period" => self.scenario.period = parse(key, v)?,
            "amplitude" => self.scenario.amplitude = parse_opt(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data" => self.data = if v.is_empty() || v == "none" { None } else { Some(PathBuf::from(v)) },
            "workers" => self.workers = parse(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}, workers",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn resolved_sampling(&self) -> SamplingMode {
        self.sampling.unwrap_or(if self.method.is_spectral() {
            SamplingMode::Random
        } else {
            SamplingMode::Even
        })
    }

    pub fn resolved_max_iters(&self) -> usize {
        self.max_iters.unwrap_or(match self.method {
            MethodKind::DeltaSnode => 500,
            MethodKind::AlphaSnode => 100,
            _ => 500,
        })
    }

    /// Stopping level of each method's driven objective.
    pub fn resolved_tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(match (self.method, self.scenario.kind) {
            (MethodKind::DeltaSnode, _) => 1e-2,
            (MethodKind::AlphaSnode, ScenarioKind::Vehicle) => 0.0,
            (MethodKind::AlphaSnode, _) => self.train.gamma * 0.11 + 0.01,
            _ => 0.0,
        })
    }

    pub fn resolved_test_seed(&self) -> u64 {
        self.test_seed.unwrap_or(self.seed.wrapping_add(10_000))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iters: self.resolved_max_iters(),
            tolerance: self.resolved_tolerance(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn solver(&self) -> Option<SolverConfig> {
        let base = match self.method {
            MethodKind::BkprEuler | MethodKind::AdjEuler => SolverConfig::euler(Some(self.euler_dt.unwrap_or_else(|| self.scenario.euler_dt()))),
            MethodKind::BkprDopri5 | MethodKind::AdjDopri5 => SolverConfig::dopri5(self.rtol, self.atol),
            _ => return None,
        };
        Some(base.with_min_step(self.min_step).with_max_steps(self.max_steps))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train_config().validate()?;
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!("data_fraction must be in (0, 1], got {}", self.data_fraction)));
        }
        if self.order == 0 {
            return Err(Error::Config("p must be at least 1".into()));
        }
        if let Some(s) = self.solver() {
            s.validate()?;
        }
        Ok(())
    }

    /// Effective value of every key, for the run summary.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let s = &self.scenario;
        let pairs: [(&str, String); 33] = [
            ("scenario", s.kind.name().into()),
            ("method", self.method.name().into()),
            ("data_fraction", self.data_fraction.to_string()),
            ("sampling", format!("{:?}", self.resolved_sampling()).to_lowercase()),
            ("p", self.order.to_string()),
            ("gamma", t.gamma.to_string()),
            ("adam_lr", t.adam_lr.to_string()),
            ("sgd_lr", t.sgd_lr.to_string()),
            ("n_x", t.n_x.to_string()),
            ("n_t", t.n_t.to_string()),
            ("max_iters", self.resolved_max_iters().to_string()),
            ("tolerance", self.resolved_tolerance().to_string()),
            ("perturbation", t.perturbation.to_string()),
            ("weighted", t.weighted.to_string()),
            ("rtol", self.rtol.to_string()),
            ("atol", self.atol.to_string()),
            ("min_step", self.min_step.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("euler_dt", self.euler_dt.unwrap_or_else(|| s.euler_dt()).to_string()),
            ("seed", self.seed.to_string()),
            ("test_seed", self.resolved_test_seed().to_string()),
            ("batch", s.batch.to_string()),
            ("test_batch", self.test_batch.unwrap_or(s.batch).to_string()),
            ("horizon", s.horizon.to_string()),
            ("n_points", s.n_points.to_string()),
            ("n_agents", s.n_agents.to_string()),
            ("hidden", s.hidden.to_string()),
            ("harmonics", s.harmonics.to_string()),
            ("period", s.period.to_string()),
            ("amplitude", s.amplitude().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("data", self.data.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())),
            ("workers", self.workers.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// What a run reports, as written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    /// `"completed"` or `"Fail"`.
    pub outcome: String,
    pub termination: Termination,
    pub fail_reason: Option<String>,
    pub fail_iteration: Option<usize>,
    pub iterations: usize,
    pub total_ms: f64,
    pub mean_ms_per_iteration: f64,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
    /// Rollout data loss of the initial parameters on the training observations.
    pub initial_loss: Option<f64>,
    /// Same for the trained parameters; `None` if the rollout failed.
    pub final_loss: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_diverged: bool,
    pub config: BTreeMap<String, String>,
}

impl RunSummary {
    pub fn failed(&self) -> bool {
        self.outcome == "Fail"
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub summary_path: PathBuf,
    pub train_fit: PathBuf,
    pub test_rollout: PathBuf,
    pub summary: RunSummary,
    pub report: TrainReport,
    pub params: ParamSet,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    iteration: usize,
    elapsed_ms: f64,
    #[serde(rename = "L")]
    data_loss: Option<f64>,
    #[serde(rename = "R")]
    residual: Option<f64>,
    combined: f64,
}

fn metrics_csv(report: &TrainReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.records {
        w.serialize(MetricRow {
            iteration: r.iteration,
            elapsed_ms: r.elapsed_ms,
            data_loss: r.data_loss,
            residual: r.residual,
            combined: r.combined,
        })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Serialize)]
struct TrajectoryRow {
    time: f64,
    sample: usize,
    state: usize,
    #[serde(rename = "true")]
    truth: f64,
    predicted: Option<f64>,
}

/// First-sample trajectories in long form.
fn trajectory_csv(times: &[f64], truth: &[Tensor], predicted: Option<&[Tensor]>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (k, &t) in times.iter().enumerate() {
        for s in 0..truth[k].cols() {
            w.serialize(TrajectoryRow {
                time: t,
                sample: 0,
                state: s,
                truth: truth[k].get(0, s),
                predicted: predicted.map(|p| p[k].get(0, s)),
            })?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Training data for a run: loaded or simulated, then subsampled.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let full = match &cfg.data {
        Some(path) => {
            let ds = Dataset::from_json(&fs::read_to_string(path)?)?;
            if ds.meta.scenario != cfg.scenario.kind {
                return Err(Error::Config(format!(
                    "data file holds scenario {}, config asks for {}",
                    ds.meta.scenario.name(),
                    cfg.scenario.kind.name()
                )));
            }
            ds
        }
        None => scenarios::generate(&cfg.scenario, cfg.seed)?,
    };
    full.downsample(cfg.data_fraction, cfg.resolved_sampling(), cfg.seed)
}

/// Surrogate parameters a run starts from.
pub fn initial_params(cfg: &ExperimentConfig) -> ParamSet {
    cfg.scenario.surrogate().init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Trains, evaluates and writes the artifacts of one run. Solver failures
/// during training are recorded in the summary, not returned as errors.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_in_pool(cfg))
}

fn run_in_pool(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    fs::create_dir_all(&cfg.out_dir)?;
    let ds = prepare_dataset(cfg)?;
    let input = ds.input_fn();
    let data = ds.training_data(&input);
    let model = cfg.scenario.surrogate();
    let theta0 = initial_params(cfg);
    let eval_solver = scenarios::evaluation_solver();
    let initial_loss = finite(train::rollout_loss(model.as_ref(), &theta0, &data, &eval_solver));
    let tc = cfg.train_config();

    let (params, report) = match cfg.method {
        MethodKind::DeltaSnode | MethodKind::AlphaSnode => {
            let grid = CollocationGrid::on_window(cfg.order, ds.times[0], *ds.times.last().expect("non-empty grid"))?;
            let problem = SpectralProblem::new(model.as_ref(), grid, &data, tc.weighted)?;
            let (p, r, _) = if cfg.method == MethodKind::DeltaSnode {
                train::train_delta_snode(&problem, &data, theta0, &tc)?
            } else {
                train::train_alpha_snode(&problem, &data, theta0, &tc)?
            };
            (p, r)
        }
        m => {
            let gradient = if matches!(m, MethodKind::AdjEuler | MethodKind::AdjDopri5) {
                Gradient::Adjoint
            } else {
                Gradient::Backprop
            };
            let solver = cfg.solver().expect("rollout methods have a solver");
            train::train_rollout(model.as_ref(), &data, theta0, &solver, gradient, &tc)?
        }
    };

    let fit = solvers::rollout(model.as_ref(), &params, &ds.states[0], &input, &ds.times, &eval_solver).ok();
    let final_loss = fit.as_ref().map(|_| train::rollout_loss(model.as_ref(), &params, &data, &eval_solver)).and_then(finite);

    let failed = report.failed();
    let test_cfg = ScenarioConfig {
        batch: cfg.test_batch.unwrap_or(cfg.scenario.batch),
        ..cfg.scenario.clone()
    };
    let test = scenarios::generate_test(&test_cfg, cfg.resolved_test_seed())?;
    let eval = (!failed).then(|| scenarios::evaluate(&test_cfg, &params, &test));

    let (fail_reason, fail_iteration) = match &report.termination {
        Termination::Failed { reason, iteration } => (Some(reason.clone()), Some(*iteration)),
        _ => (None, None),
    };
    let summary = RunSummary {
        scenario: cfg.scenario.kind.name().into(),
        method: cfg.method.name().into(),
        seed: cfg.seed,
        outcome: if failed { "Fail".into() } else { "completed".into() },
        termination: report.termination.clone(),
        fail_reason,
        fail_iteration,
        iterations: report.iterations,
        total_ms: report.total_ms,
        mean_ms_per_iteration: report.ms_per_iteration(),
        initial_objective: report.initial_objective().and_then(finite),
        final_objective: report.final_objective().and_then(finite),
        initial_loss,
        final_loss,
        test_mse: eval.as_ref().and_then(|e| finite(e.test_mse)),
        test_diverged: eval.as_ref().is_some_and(|e| e.diverged),
        config: cfg.echo(),
    };

    let metrics = cfg.out_dir.join("metrics.csv");
    let summary_path = cfg.out_dir.join("summary.json");
    let train_fit = cfg.out_dir.join("train_fit.csv");
    let test_rollout = cfg.out_dir.join("test_rollout.csv");
    write_atomic(&metrics, &metrics_csv(&report)?)?;
    write_atomic(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write_atomic(&train_fit, &trajectory_csv(&ds.times, &ds.states, fit.as_ref().map(|r| r.states.as_slice()))?)?;
    let predicted = eval.as_ref().filter(|e| !e.diverged).map(|e| e.predicted.as_slice());
    write_atomic(&test_rollout, &trajectory_csv(&test.times, &test.states, predicted)?)?;
    write_atomic(&cfg.out_dir.join("params.json"), params.to_json()?.as_bytes())?;

    Ok(RunArtifacts {
        metrics,
        summary_path,
        train_fit,
        test_rollout,
        summary,
        report,
        params,
    })
}

/// Simulates the configured scenario and writes the full dataset as JSON.
pub fn gen_data(cfg: &ExperimentConfig, path: &Path) -> Result<Dataset> {
    cfg.scenario.validate()?;
    let ds = scenarios::generate(&cfg.scenario, cfg.seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, ds.to_json()?.as_bytes())?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub outcome: String,
    pub ms_per_iteration: f64,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub test_mse: Option<f64>,
    pub fastest: bool,
    pub lowest_mse: bool,
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let path = if path.is_dir() { path.join("summary.json") } else { path.to_path_buf() };
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Side-by-side rows for runs of one scenario and seed.
pub fn compare(summaries: &[RunSummary]) -> Result<Vec<ComparisonRow>> {
    if summaries.len() < 2 {
        return Err(Error::Config(format!("compare needs at least two runs, got {}", summaries.len())));
    }
    let first = &summaries[0];
    if let Some(other) = summaries.iter().find(|s| s.scenario != first.scenario || s.seed != first.seed) {
        return Err(Error::Config(format!(
            "cannot compare {} (seed {}) with {} (seed {})",
            first.scenario, first.seed, other.scenario, other.seed
        )));
    }
    let fastest = summaries
        .iter()
        .filter(|s| !s.failed() && s.iterations > 0)
        .map(|s| s.mean_ms_per_iteration)
        .fold(f64::INFINITY, f64::min);
    let best = summaries.iter().filter_map(|s| s.test_mse).fold(f64::INFINITY, f64::min);
    Ok(summaries
        .iter()
        .map(|s| ComparisonRow {
            method: s.method.clone(),
            outcome: s.outcome.clone(),
            ms_per_iteration: s.mean_ms_per_iteration,
            iterations: s.iterations,
            final_loss: s.final_loss,
            test_mse: s.test_mse,
            fastest: !s.failed() && s.iterations > 0 && s.mean_ms_per_iteration == fastest,
            lowest_mse: s.test_mse == Some(best),
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Fixed-width table for the console.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4e}"));
    let mut out = format!(
        "{:<14} {:>10} {:>12} {:>8} {:>12} {:>12}\n",
        "method", "outcome", "ms/iter", "iters", "final loss", "test MSE"
    );
    for r in rows {
        let mut marks = String::new();
        if r.fastest {
            marks.push_str(" [fastest]");
        }
        if r.lowest_mse {
            marks.push_str(" [lowest MSE]");
        }
        out.push_str(&format!(
            "{:<14} {:>10} {:>12.3} {:>8} {:>12} {:>12}{}\n",
            r.method,
            r.outcome,
            r.ms_per_iteration,
            r.iterations,
            opt(r.final_loss),
            opt(r.test_mse),
            marks
        ));
    }
    out
}

//! Ground-truth data for the two experiments, sampling regimes, and
//! extended-horizon evaluation of trained surrogates.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{MultiAgentModel, MultiAgentParams, OdeModel, ParamSet, VehicleSurrogate, VehicleTrue, VehicleTrueParams};
use crate::solvers::{self, InputFn, SolverConfig};
use crate::spectral::FourierInputBasis;
use crate::train::TrainingData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Vehicle,
    Multiagent,
    MultiagentHardGains,
}

impl ScenarioKind {
    pub const NAMES: [&'static str; 3] = ["vehicle", "multiagent", "multiagent_hard_gains"];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Vehicle => "vehicle",
            ScenarioKind::Multiagent => "multiagent",
            ScenarioKind::MultiagentHardGains => "multiagent_hard_gains",
        }
    }

    /// Test rollouts run this many training horizons.
    pub fn horizon_factor(&self) -> usize {
        match self {
            ScenarioKind::Vehicle => 5,
            _ => 4,
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle" => Ok(ScenarioKind::Vehicle),
            "multiagent" => Ok(ScenarioKind::Multiagent),
            "multiagent_hard_gains" => Ok(ScenarioKind::MultiagentHardGains),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?}; expected one of {}",
                ScenarioKind::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub batch: usize,
    pub horizon: f64,
    pub n_points: usize,
    pub n_agents: usize,
    pub harmonics: usize,
    /// Period of the input series, seconds.
    pub period: f64,
    /// Amplitude of the leading input term; `None` uses the scenario default.
    pub amplitude: Option<f64>,
    pub hidden: usize,
    /// Uniform jitter on test-time agent positions and headings.
    pub test_jitter: f64,
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            batch: 100,
            horizon: 10.0,
            n_points: 100,
            n_agents: 10,
            harmonics: 5,
            period: 40.0,
            amplitude: None,
            hidden: 32,
            test_jitter: 0.1,
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude.unwrap_or(match self.kind {
            ScenarioKind::Vehicle => 1.0,
            _ => 0.1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.n_points < 2 {
            return Err(Error::Config("n_points must be at least 2".into()));
        }
        if !(self.period > 0.0) {
            return Err(Error::Config("input period must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if self.kind != ScenarioKind::Vehicle {
            self.train_params().validate()?;
        }
        Ok(())
    }

    pub fn train_params(&self) -> MultiAgentParams {
        match self.kind {
            ScenarioKind::MultiagentHardGains => MultiAgentParams::hard_gains(self.n_agents),
            _ => MultiAgentParams::training(self.n_agents),
        }
    }

    pub fn test_params(&self) -> MultiAgentParams {
        MultiAgentParams::test(self.n_agents)
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            ScenarioKind::Vehicle => 6,
            _ => 3 * self.n_agents,
        }
    }

    /// The dynamics that generate training data.
    pub fn true_model(&self) -> Box<dyn OdeModel> {
        match self.kind {
            ScenarioKind::Vehicle => Box::new(VehicleTrue::default()),
            _ => Box::new(MultiAgentModel::analytic(self.train_params())),
        }
    }

    pub fn surrogate(&self) -> Box<dyn OdeModel> {
        match self.kind {
            ScenarioKind::Vehicle => Box::new(VehicleSurrogate::new(self.hidden, VehicleTrueParams::default())),
            _ => Box::new(MultiAgentModel::surrogate(self.train_params(), self.hidden)),
        }
    }

    /// Truth and surrogate under the evaluation configuration.
    pub fn test_models(&self) -> (Box<dyn OdeModel>, Box<dyn OdeModel>) {
        match self.kind {
            ScenarioKind::Vehicle => (self.true_model(), self.surrogate()),
            _ => (
                Box::new(MultiAgentModel::analytic(self.test_params())),
                Box::new(MultiAgentModel::surrogate(self.test_params(), self.hidden)),
            ),
        }
    }

    /// Euler step equal to the spacing of the full observation grid.
    pub fn euler_dt(&self) -> f64 {
        self.horizon / (self.n_points - 1) as f64
    }
}

/// Tolerances for generating reference trajectories.
pub fn reference_solver() -> SolverConfig {
    SolverConfig::dopri5(1e-9, 1e-11).with_min_step(1e-14).with_max_steps(10_000_000)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Even,
    Random,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(SamplingMode::Even),
            "random" => Ok(SamplingMode::Random),
            other => Err(Error::Config(format!("unknown sampling mode {other:?}; expected even or random"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub horizon: f64,
    pub batch: usize,
}

/// Simulated trajectories on a uniform grid, with the subset of times that
/// training may use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub times: Vec<f64>,
    /// `[batch, state_dim]` per time.
    pub states: Vec<Tensor>,
    /// Per sample, one series per input channel.
    pub inputs: Vec<Vec<FourierInputBasis>>,
    pub mask: Vec<bool>,
}

impl Dataset {
    pub fn batch(&self) -> usize {
        self.meta.batch
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].cols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Inputs of the whole batch at `t`, `[batch, input_dim]`.
    pub fn input_at(&self, t: f64) -> Tensor {
        let n_in = self.input_dim();
        let data = self.inputs.iter().flat_map(|chs| chs.iter().map(move |c| c.eval(t))).collect();
        Tensor::matrix(self.batch(), n_in, data)
    }

    pub fn input_fn(&self) -> impl Fn(f64) -> Tensor + Sync + '_ {
        move |t| self.input_at(t)
    }

    pub fn observed_times(&self) -> Vec<f64> {
        self.times.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(t, _)| *t).collect()
    }

    pub fn observed_states(&self) -> Vec<Tensor> {
        self.states.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(s, _)| s.clone()).collect()
    }

    pub fn training_data<'a>(&self, input: InputFn<'a>) -> TrainingData<'a> {
        TrainingData {
            times: self.observed_times(),
            targets: self.observed_states(),
            input,
        }
    }

    /// Keeps `t = 0` plus a subset of the grid, without re-simulating.
    pub fn downsample(&self, fraction: f64, mode: SamplingMode, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction must be in (0, 1], got {fraction}")));
        }
        let n = self.times.len();
        let count = (fraction * n as f64).round() as usize;
        if count < 2 {
            return Err(Error::Config(format!("data fraction {fraction} leaves fewer than 2 points")));
        }
        let mut mask = vec![false; n];
        mask[0] = true;
        match mode {
            SamplingMode::Even => {
                for i in 0..count {
                    mask[((i * n) as f64 / count as f64).round() as usize] = true;
                }
            }
            SamplingMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in sample_indices(&mut rng, n - 1, count - 1) {
                    mask[i + 1] = true;
                }
            }
        }
        Ok(Dataset { mask, ..self.clone() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(s)?;
        if ds.times.len() != ds.states.len() || ds.times.len() != ds.mask.len() || !ds.mask.first().copied().unwrap_or(false) {
            return Err(Error::Contract("dataset times, states and mask disagree".into()));
        }
        if ds.inputs.len() != ds.meta.batch || ds.states.iter().any(|s| s.rows() != ds.meta.batch || !s.all_finite()) {
            return Err(Error::Contract("dataset batch is inconsistent or non-finite".into()));
        }
        Ok(ds)
    }
}

pub fn linspace(t1: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| t1 * i as f64 / (n - 1) as f64).collect()
}

fn draw_inputs(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<FourierInputBasis>>> {
    let a = cfg.amplitude();
    (0..cfg.batch)
        .map(|_| match cfg.kind {
            ScenarioKind::Vehicle => Ok(vec![
                FourierInputBasis::decaying(cfg.harmonics, a, cfg.period, rng)?,
                FourierInputBasis::zero(),
                FourierInputBasis::decaying(cfg.harmonics, a, cfg.period, rng)?,
            ]),
            _ => Ok(vec![FourierInputBasis::decaying(cfg.harmonics, a, cfg.period, rng)?]),
        })
        .collect()
}

/// Agents on a unit-spaced column at `x = 1`, heading along `x`.
///
/// A row at equal `y` would put every pair on the branch cut of
/// `atan2(dy, dx)`, where the avoidance turn rate jumps and adaptive steppers
/// chatter.
pub fn formation(n_agents: usize) -> Vec<f64> {
    (0..n_agents).flat_map(|i| [1.0, (i + 1) as f64, 0.0]).collect()
}

/// Integrates `model` separately for every sample.
pub fn simulate(
    model: &dyn OdeModel,
    x0: &[Vec<f64>],
    inputs: &[Vec<FourierInputBasis>],
    times: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<Tensor>> {
    let per_sample: Vec<Vec<Tensor>> = x0
        .par_iter()
        .zip(inputs)
        .map(|(x, chs)| {
            let input = |t: f64| Tensor::matrix(1, chs.len(), chs.iter().map(|c| c.eval(t)).collect());
            let r = solvers::rollout(model, &ParamSet::new(), &Tensor::matrix(1, x.len(), x.clone()), &input, times, solver)?;
            Ok(r.states)
        })
        .collect::<Result<_>>()?;
    let s = x0[0].len();
    Ok((0..times.len())
        .map(|k| Tensor::matrix(x0.len(), s, per_sample.iter().flat_map(|r| r[k].data().to_vec()).collect()))
        .collect())
}

fn build(cfg: &ScenarioConfig, model: &dyn OdeModel, x0: Vec<Vec<f64>>, inputs: Vec<Vec<FourierInputBasis>>, horizon: f64, n_points: usize, seed: u64) -> Result<Dataset> {
    let times = linspace(horizon, n_points);
    let states = simulate(model, &x0, &inputs, &times, &reference_solver()).map_err(|e| Error::Config(format!("reference simulation failed: {e}")))?;
    Ok(Dataset {
        meta: DatasetMeta {
            scenario: cfg.kind,
            seed,
            horizon,
            batch: cfg.batch,
        },
        mask: vec![true; times.len()],
        times,
        states,
        inputs,
    })
}

/// Training data for the configured scenario.
pub fn generate(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = draw_inputs(cfg, &mut rng)?;
    let x0 = match cfg.kind {
        ScenarioKind::Vehicle => vec![vec![0.0; 6]; cfg.batch],
        _ => vec![formation(cfg.n_agents); cfg.batch],
    };
    build(cfg, cfg.true_model().as_ref(), x0, inputs, cfg.horizon, cfg.n_points, seed)
}

/// Held-out data over the extended horizon, under the evaluation configuration.
pub fn generate_test(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = cfg.kind.horizon_factor();
    let horizon = cfg.horizon * factor as f64;
    let n_points = factor * (cfg.n_points - 1) + 1;
    let (truth, _) = cfg.test_models();
    let (x0, inputs) = match cfg.kind {
        ScenarioKind::Vehicle => (vec![vec![0.0; 6]; cfg.batch], draw_inputs(cfg, &mut rng)?),
        _ => {
            let j = cfg.test_jitter;
            let x0 = (0..cfg.batch)
                .map(|_| {
                    formation(cfg.n_agents)
                        .into_iter()
                        .map(|v| if j > 0.0 { v + rng.gen_range(-j..j) } else { v })
                        .collect()
                })
                .collect();
            (x0, vec![vec![FourierInputBasis::zero()]; cfg.batch])
        }
    };
    build(cfg, truth.as_ref(), x0, inputs, horizon, n_points, seed)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    /// `+inf` when the surrogate rollout failed.
    pub test_mse: f64,
    pub diverged: bool,
    pub horizon_factor: usize,
    pub times: Vec<f64>,
    pub predicted: Vec<Tensor>,
    pub truth: Vec<Tensor>,
}

/// Solver for evaluation rollouts of trained surrogates.
pub fn evaluation_solver() -> SolverConfig {
    SolverConfig::dopri5(1e-7, 1e-9).with_min_step(1e-12).with_max_steps(20_000)
}

/// Rolls the surrogate out against held-out truth.
pub fn evaluate(cfg: &ScenarioConfig, params: &ParamSet, test: &Dataset) -> EvalResult {
    let (_, surrogate) = cfg.test_models();
    let input = test.input_fn();
    let out = solvers::rollout(surrogate.as_ref(), params, &test.states[0], &input, &test.times, &evaluation_solver());
    match out {
        Ok(r) => EvalResult {
            test_mse: solvers::trajectory_mse(&r.states, &test.states),
            diverged: false,
            horizon_factor: cfg.kind.horizon_factor(),
            times: test.times.clone(),
            predicted: r.states,
            truth: test.states.clone(),
        },
        Err(_) => EvalResult {
            test_mse: f64::INFINITY,
            diverged: true,
            horizon_factor: cfg.kind.horizon_factor(),
            times: test.times.clone(),
            predicted: Vec::new(),
            truth: test.states.clone(),
        },
    }
}

//! Spectral training: trajectory initialisation, the weighted collocation
//! residual, the data loss, δ-SNODE and α-SNODE, plus the solver-based
//! baselines they are compared against.
//!
//! Trajectories are stored as node values, `[batch * (p + 1), state_dim]`,
//! sample-major. Node 0 of every sample is the initial condition and is never
//! updated.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::models::{OdeModel, ParamSet};
use crate::optim::{Adam, Sgd};
use crate::solvers::{self, InputFn, SolverConfig};
use crate::spectral::CollocationGrid;

/// Observed trajectories of a batch.
pub struct TrainingData<'a> {
    /// Observation times, strictly increasing; `times[0]` is the initial time.
    pub times: Vec<f64>,
    /// `[batch, state_dim]` at each observation time.
    pub targets: Vec<Tensor>,
    /// Inputs for the whole batch.
    pub input: InputFn<'a>,
}

impl TrainingData<'_> {
    pub fn batch(&self) -> usize {
        self.targets[0].rows()
    }

    pub fn state_dim(&self) -> usize {
        self.targets[0].cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.targets.len() {
            return Err(Error::Contract("one target per observation time is required".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract("observation times must be increasing".into()));
        }
        let shape = self.targets[0].shape();
        if self.targets.iter().any(|t| t.shape() != shape) {
            return Err(Error::Contract("targets must share one shape".into()));
        }
        Ok(())
    }
}

/// Node values of every sample's trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDecision {
    values: Tensor,
    batch: usize,
    nodes: usize,
}

impl TrajectoryDecision {
    pub fn new(values: Tensor, batch: usize) -> Self {
        assert_eq!(values.rows() % batch, 0, "rows must split evenly into samples");
        let nodes = values.rows() / batch;
        Self { values, batch, nodes }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `[p + 1, state_dim]` node values of one sample.
    pub fn sample(&self, b: usize) -> Tensor {
        let s = self.values.cols();
        let start = b * self.nodes * s;
        Tensor::matrix(self.nodes, s, self.values.data()[start..start + self.nodes * s].to_vec())
    }

    /// Clamped initial values, `[batch, state_dim]`.
    pub fn initial(&self) -> Tensor {
        let s = self.values.cols();
        let mut out = Vec::with_capacity(self.batch * s);
        for b in 0..self.batch {
            out.extend_from_slice(self.values.row(b * self.nodes));
        }
        Tensor::matrix(self.batch, s, out)
    }

    /// Series coefficients of one sample's component `dim`.
    pub fn coeffs(&self, grid: &CollocationGrid, b: usize, dim: usize) -> Result<Vec<f64>> {
        let sample = self.sample(b);
        let column: Vec<f64> = (0..self.nodes).map(|q| sample.get(q, dim)).collect();
        grid.values_to_coeffs(&column)
    }

    /// Applies `values -= lr * grad` to every node but the clamped ones.
    fn descend(&mut self, grad: &Tensor, lr: f64) {
        let s = self.values.cols();
        let nodes = self.nodes;
        let data = self.values.data_mut();
        for (r, g) in grad.data().chunks(s).enumerate() {
            if r % nodes == 0 {
                continue;
            }
            for (v, gi) in data[r * s..(r + 1) * s].iter_mut().zip(g) {
                *v -= lr * gi;
            }
        }
    }
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), data)
}

/// Least-squares fit of the series to the observations with node 0 clamped,
/// followed by a uniform perturbation of amplitude `noise` on the free nodes.
///
/// The fit is over `delta = values - x0`; a ridge on the series coefficients
/// of `delta` is added when the normal equations are underdetermined or not
/// positive definite, which pulls the fit towards the constant `x0`.
pub fn init_trajectory(data: &TrainingData, grid: &CollocationGrid, noise: f64, seed: u64) -> Result<TrajectoryDecision> {
    data.validate()?;
    let k = grid.len();
    let (t0, t1) = grid.basis().domain();
    if (data.times[0] - t0).abs() > 1e-12 * (t1 - t0).max(1.0) {
        return Err(Error::Contract("first observation must be at the start of the window".into()));
    }
    let (batch, s) = (data.batch(), data.state_dim());
    let later = &data.times[1..];
    let phi = grid.interpolation_matrix(later)?;
    let a = phi.columns(1, k - 1).into_owned();
    let n_obs = later.len();

    let mut rhs = DMatrix::zeros(n_obs, batch * s);
    for (j, y) in data.targets[1..].iter().enumerate() {
        for b in 0..batch {
            for d in 0..s {
                rhs[(j, b * s + d)] = y.get(b, d) - data.targets[0].get(b, d);
            }
        }
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * rhs;
    let ridge = || {
        let c = grid.m_inv().columns(1, k - 1).into_owned();
        &ata + (c.transpose() * c) * (1e-8 * n_obs.max(1) as f64)
    };
    let chol = if n_obs < k - 1 {
        ridge().cholesky()
    } else {
        ata.clone().cholesky().or_else(|| ridge().cholesky())
    }
    .ok_or_else(|| Error::Numerical("trajectory fit is singular even with ridge".into()))?;
    let delta = chol.solve(&atb);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; batch * k * s];
    for b in 0..batch {
        for q in 0..k {
            for d in 0..s {
                let x0 = data.targets[0].get(b, d);
                values[(b * k + q) * s + d] = if q == 0 {
                    x0
                } else {
                    let xi = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                    x0 + delta[(q - 1, b * s + d)] + xi
                };
            }
        }
    }
    Ok(TrajectoryDecision::new(Tensor::matrix(batch * k, s, values), batch))
}

/// Collocation residual and data-fit loss for one batch.
pub struct SpectralProblem<'a> {
    pub model: &'a dyn OdeModel,
    pub grid: CollocationGrid,
    batch: usize,
    d_hat: Tensor,
    /// `[batch * (p + 1), input_dim]`.
    inputs: Tensor,
    /// Quadrature weight of each node row, `[p + 1]`.
    weights: Vec<f64>,
    interp: Tensor,
    /// `[batch * n_obs, state_dim]`.
    observed: Tensor,
    n_obs: usize,
    /// Samples per parallel work item.
    pub chunk: usize,
}

/// Residual value with the requested gradients.
pub struct ResidualEval {
    pub value: f64,
    pub grad_x: Option<Tensor>,
    pub grad_theta: Option<Vec<f64>>,
}

impl<'a> SpectralProblem<'a> {
    /// `weighted = false` sums residuals over the nodes without quadrature weights.
    pub fn new(model: &'a dyn OdeModel, grid: CollocationGrid, data: &TrainingData, weighted: bool) -> Result<Self> {
        data.validate()?;
        if data.state_dim() != model.state_dim() {
            return Err(Error::Contract(format!(
                "data has {} states, model expects {}",
                data.state_dim(),
                model.state_dim()
            )));
        }
        let batch = data.batch();
        let k = grid.len();
        let n_in = model.input_dim();
        let mut inputs = vec![0.0; batch * k * n_in];
        for (q, &t) in grid.nodes().iter().enumerate() {
            let u = (data.input)(t);
            if u.rows() != batch || u.cols() != n_in {
                return Err(Error::Contract(format!("input has shape {:?}, expected [{batch}, {n_in}]", u.shape())));
            }
            for b in 0..batch {
                inputs[(b * k + q) * n_in..(b * k + q + 1) * n_in].copy_from_slice(u.row(b));
            }
        }
        let s = data.state_dim();
        let n_obs = data.times.len();
        let mut observed = vec![0.0; batch * n_obs * s];
        for (j, y) in data.targets.iter().enumerate() {
            for b in 0..batch {
                observed[(b * n_obs + j) * s..(b * n_obs + j + 1) * s].copy_from_slice(y.row(b));
            }
        }
        let weights = if weighted { grid.weights().to_vec() } else { vec![1.0; k] };
        Ok(Self {
            model,
            batch,
            d_hat: to_tensor(grid.d_hat()),
            inputs: Tensor::matrix(batch * k, n_in, inputs),
            weights,
            interp: to_tensor(&grid.interpolation_matrix(&data.times)?),
            observed: Tensor::matrix(batch * n_obs, s, observed),
            n_obs,
            grid,
            chunk: 4,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn rows(&self, t: &Tensor, b0: usize, b1: usize) -> Tensor {
        let k = self.grid.len();
        let c = t.cols();
        Tensor::matrix((b1 - b0) * k, c, t.data()[b0 * k * c..b1 * k * c].to_vec())
    }

    /// `R = sum_b sum_q w_q |D^ x_b - f(x_b, u_b; theta)|^2_q / batch`.
    pub fn residual(&self, x: &TrajectoryDecision, params: &ParamSet, want_x: bool, want_theta: bool) -> ResidualEval {
        let k = self.grid.len();
        let s = self.model.state_dim();
        let starts: Vec<usize> = (0..self.batch).step_by(self.chunk.max(1)).collect();
        let parts: Vec<(f64, Option<Tensor>, Option<Vec<f64>>)> = starts
            .par_iter()
            .map(|&b0| {
                let b1 = (b0 + self.chunk.max(1)).min(self.batch);
                let mut g = Graph::new();
                let theta = if want_theta { params.leaves(&mut g) } else { params.constants(&mut g) };
                let xt = self.rows(x.values(), b0, b1);
                let xv = if want_x { g.leaf(xt) } else { g.constant(xt) };
                let u = g.constant(self.rows(&self.inputs, b0, b1));
                let dhat = g.constant(self.d_hat.clone());
                let xdot = g.block_matmul(dhat, xv);
                let f = self.model.rhs(&mut g, &theta, xv, u);
                let diff = g.sub(xdot, f);
                let sq = g.mul(diff, diff);
                let w: Vec<f64> = (0..(b1 - b0) * k).flat_map(|r| std::iter::repeat(self.weights[r % k]).take(s)).collect();
                let w = g.constant(Tensor::matrix((b1 - b0) * k, s, w));
                let wsq = g.mul(w, sq);
                let total = g.sum(wsq);
                let value = g.value(total).item();
                if !(want_x || want_theta) {
                    return (value, None, None);
                }
                let grads = g.backward(total).expect("scalar residual");
                let gx = want_x.then(|| grads.get(xv));
                let gt = want_theta.then(|| params.flat_gradient(&grads, &theta));
                (value, gx, gt)
            })
            .collect();

        let inv_b = 1.0 / self.batch as f64;
        let value = parts.iter().map(|p| p.0).sum::<f64>() * inv_b;
        let grad_x = want_x.then(|| {
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|p| p.1.as_ref().expect("x gradient").data().iter().map(|v| v * inv_b))
                .collect();
            Tensor::matrix(self.batch * k, s, data)
        });
        let grad_theta = want_theta.then(|| {
            let mut acc = vec![0.0; params.size()];
            for p in &parts {
                for (a, v) in acc.iter_mut().zip(p.2.as_ref().expect("theta gradient")) {
                    *a += v * inv_b;
                }
            }
            acc
        });
        ResidualEval {
            value,
            grad_x,
            grad_theta,
        }
    }

    /// Mean squared error of the interpolated trajectories at the
    /// observation times, and its gradient with respect to the node values.
    pub fn data_loss(&self, x: &TrajectoryDecision) -> (f64, Tensor) {
        let k = self.grid.len();
        let s = x.values().cols();
        let n = (self.batch * self.n_obs * s) as f64;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(self.batch * k * s);
        for b in 0..self.batch {
            let xb = x.sample(b);
            let mut resid = self.interp.matmul(&xb);
            let yb = Tensor::matrix(
                self.n_obs,
                s,
                self.observed.data()[b * self.n_obs * s..(b + 1) * self.n_obs * s].to_vec(),
            );
            resid.add_scaled(&yb, -1.0);
            value += resid.squared_norm();
            let gb = self.interp.matmul_tn(&resid);
            grad.extend(gb.data().iter().map(|v| 2.0 * v / n));
        }
        (value / n, Tensor::matrix(self.batch * k, s, grad))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    Failed { reason: String, iteration: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub elapsed_ms: f64,
    /// Data loss; `None` where the method does not track it.
    pub data_loss: Option<f64>,
    pub residual: Option<f64>,
    /// The quantity the method drives down.
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub records: Vec<IterRecord>,
    pub termination: Termination,
    /// Optimizer iterations performed (epochs for α-SNODE).
    pub iterations: usize,
    pub total_ms: f64,
}

impl TrainReport {
    fn new(method: &str) -> Self {
        Self {
            method: method.to_string(),
            records: Vec::new(),
            termination: Termination::MaxIters,
            iterations: 0,
            total_ms: 0.0,
        }
    }

    pub fn ms_per_iteration(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.total_ms / self.iterations as f64
        }
    }

    pub fn initial_objective(&self) -> Option<f64> {
        self.records.first().map(|r| r.combined)
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.combined)
    }

    pub fn failed(&self) -> bool {
        matches!(self.termination, Termination::Failed { .. })
    }
}

/// Optimizer settings shared by all methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam_lr: f64,
    pub sgd_lr: f64,
    pub gamma: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub max_iters: usize,
    /// Stopping level of the driven objective.
    pub tolerance: f64,
    /// Amplitude of the trajectory perturbation after the initial fit.
    pub perturbation: f64,
    pub weighted: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam_lr: 1e-2,
            sgd_lr: 1e-3,
            gamma: 3.0,
            n_x: 10,
            n_t: 10,
            max_iters: 500,
            tolerance: 1e-2,
            perturbation: 0.1,
            weighted: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0 && self.sgd_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.tolerance.is_nan() || self.perturbation < 0.0 {
            return Err(Error::Config("tolerance must be a number and perturbation non-negative".into()));
        }
        Ok(())
    }
}

/// Fits the trajectory once, then runs ADAM on the parameters against the
/// residual until it drops to `cfg.tolerance`.
pub fn train_delta_snode(problem: &SpectralProblem, data: &TrainingData, theta0: ParamSet, cfg: &TrainConfig) -> Result<(ParamSet, TrainReport, TrajectoryDecision)> {
    cfg.validate()?;
    let x = init_trajectory(data, &problem.grid, cfg.perturbation, cfg.seed)?;
    let (l, _) = problem.data_loss(&x);
    let mut params = theta0;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len(), cfg.adam_lr);
    let mut report = TrainReport::new("delta_snode");
    let start = Instant::now();
    for it in 0..=cfg.max_iters {
        let tick = Instant::now();
        let eval = problem.residual(&x, &params, false, true);
        let r = eval.value;
        if !r.is_finite() {
            report.termination = Termination::Failed {
                reason: "non-finite residual".into(),
                iteration: it,
            };
            break;
        }
        let done = r <= cfg.tolerance;
        if !done && it < cfg.max_iters {
            adam.step(&mut flat, &eval.grad_theta.expect("theta gradient"));
            params.set_flat(&flat);
        }
        report.records.push(IterRecord {
            iteration: it,
            elapsed_ms: tick.elapsed().as_secs_f64() * 1e3,
            data_loss: Some(l),
            residual: Some(r),
            combined: r,
        });
        if done {
            report.termination = Termination::Converged;
            break;
        }
        if it < cfg.max_iters {
            report.iterations += 1;
        }
    }
    report.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((params, report, x))
}

/// Alternates `n_x` SGD steps on the free node values against `gamma L + R`
/// with `n_t` ADAM steps on the parameters against `R`, per epoch.
///
/// The trajectory gradient is taken per sample (the batch mean is undone),
/// so the SGD step size does not shrink with the batch size.
pub fn train_alpha_snode(problem: &SpectralProblem, data: &TrainingData, theta0: ParamSet, cfg: &TrainConfig) -> Result<(ParamSet, TrainReport, TrajectoryDecision)> {
    cfg.validate()?;
    let mut x = init_trajectory(data, &problem.grid, cfg.perturbation, cfg.seed)?;
    let mut params = theta0;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len(), cfg.adam_lr);
    let sgd = Sgd::new(cfg.sgd_lr);
    let per_sample = problem.batch() as f64;
    let mut report = TrainReport::new("alpha_snode");
    let start = Instant::now();
    for epoch in 0..=cfg.max_iters {
        let tick = Instant::now();
        let (l, _) = problem.data_loss(&x);
        let r = problem.residual(&x, &params, false, false).value;
        let combined = cfg.gamma * l + r;
        if !combined.is_finite() {
            report.termination = Termination::Failed {
                reason: "non-finite objective".into(),
                iteration: epoch,
            };
            break;
        }
        let done = combined <= cfg.tolerance;
        if !done && epoch < cfg.max_iters {
            for _ in 0..cfg.n_x {
                let (_, gl) = problem.data_loss(&x);
                let mut g = problem.residual(&x, &params, true, false).grad_x.expect("x gradient");
                g.add_scaled(&gl, cfg.gamma);
                let g = g.map(|v| v * per_sample);
                x.descend(&g, sgd.lr);
            }
            for _ in 0..cfg.n_t {
                let eval = problem.residual(&x, &params, false, true);
                adam.step(&mut flat, &eval.grad_theta.expect("theta gradient"));
                params.set_flat(&flat);
            }
        }
        report.records.push(IterRecord {
            iteration: epoch,
            elapsed_ms: tick.elapsed().as_secs_f64() * 1e3,
            data_loss: Some(l),
            residual: Some(r),
            combined,
        });
        if done {
            report.termination = Termination::Converged;
            break;
        }
        if epoch < cfg.max_iters {
            report.iterations += 1;
        }
    }
    report.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((params, report, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gradient {
    Backprop,
    Adjoint,
}

/// Gradient descent on the rollout data loss, differentiated either through
/// the recorded solver or by the adjoint method. Solver failures end training
/// with [`Termination::Failed`].
pub fn train_rollout(
    model: &dyn OdeModel,
    data: &TrainingData,
    theta0: ParamSet,
    solver: &SolverConfig,
    gradient: Gradient,
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    data.validate()?;
    solver.validate()?;
    let name = match (gradient, solver.method) {
        (Gradient::Backprop, solvers::Method::Euler) => "bkpr_euler",
        (Gradient::Backprop, solvers::Method::Dopri5) => "bkpr_dopri5",
        (Gradient::Adjoint, solvers::Method::Euler) => "adj_euler",
        (Gradient::Adjoint, solvers::Method::Dopri5) => "adj_dopri5",
    };
    let mut params = theta0;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len(), cfg.adam_lr);
    let mut report = TrainReport::new(name);
    let start = Instant::now();
    for it in 0..=cfg.max_iters {
        let tick = Instant::now();
        let out = match gradient {
            Gradient::Backprop => solvers::backprop_rollout_loss(model, &params, data.input, &data.times, &data.targets, solver),
            Gradient::Adjoint => solvers::adjoint_gradient(model, &params, data.input, &data.times, &data.targets, solver),
        };
        let (loss, grad) = match out {
            Ok(v) => v,
            Err(e) if e.is_solver_failure() => {
                report.termination = Termination::Failed {
                    reason: e.to_string(),
                    iteration: it,
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let done = loss <= cfg.tolerance;
        if !done && it < cfg.max_iters {
            adam.step(&mut flat, &grad);
            params.set_flat(&flat);
        }
        report.records.push(IterRecord {
            iteration: it,
            elapsed_ms: tick.elapsed().as_secs_f64() * 1e3,
            data_loss: Some(loss),
            residual: None,
            combined: loss,
        });
        if done {
            report.termination = Termination::Converged;
            break;
        }
        if it < cfg.max_iters {
            report.iterations += 1;
        }
    }
    report.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((params, report))
}

/// Data loss of the trained model when integrated from the observed initial
/// conditions; `+inf` if the rollout fails.
pub fn rollout_loss(model: &dyn OdeModel, params: &ParamSet, data: &TrainingData, solver: &SolverConfig) -> f64 {
    match solvers::rollout(model, params, &data.targets[0], data.input, &data.times, solver) {
        Ok(r) => solvers::trajectory_mse(&r.states, &data.targets),
        Err(_) => f64::INFINITY,
    }
}

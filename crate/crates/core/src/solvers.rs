//! Explicit time-steppers, differentiable rollouts and the adjoint gradient.
//!
//! The steppers are written once against [`StepOps`], which supplies the
//! right-hand side and linear combinations for a state type. Plain tensors
//! give an ordinary integrator; graph variables record every stage so the
//! rollout can be backpropagated. Step-size control always reads plain
//! values and is not differentiated.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{OdeModel, ParamSet};

/// Per-row inputs `u(t)`, shaped `[rows, input_dim]`.
pub type InputFn<'a> = &'a (dyn Fn(f64) -> Tensor + Sync);

/// States with any component above this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Dopri5,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(Error::Config(format!("unknown solver {other:?}; expected euler or dopri5"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Euler step; `None` steps once between consecutive output times.
    pub dt: Option<f64>,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub min_step: f64,
}

impl SolverConfig {
    pub fn euler(dt: Option<f64>) -> Self {
        Self {
            method: Method::Euler,
            dt,
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 100_000,
            min_step: 1e-6,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            dt: None,
            rtol,
            atol,
            max_steps: 100_000,
            min_step: 1e-6,
        }
    }

    pub fn with_min_step(mut self, min_step: f64) -> Self {
        self.min_step = min_step;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config(format!("euler dt must be positive, got {dt}")));
            }
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("rtol and atol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.min_step >= 0.0) {
            return Err(Error::Config("min_step must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub times: Vec<f64>,
    /// One `[rows, state_dim]` tensor per output time.
    pub states: Vec<Tensor>,
    pub stats: SolverStats,
}

/// State arithmetic used by the steppers.
pub trait StepOps {
    type State: Clone;

    fn rhs(&mut self, t: f64, x: &Self::State) -> Self::State;

    /// `x + sum_i c_i k_i`.
    fn combine(&mut self, x: &Self::State, terms: &[(f64, &Self::State)]) -> Self::State;

    fn value<'a>(&'a self, x: &'a Self::State) -> &'a Tensor;
}

/// Plain evaluation of a model.
pub struct NumericOps<'a> {
    pub model: &'a dyn OdeModel,
    pub params: &'a ParamSet,
    pub input: InputFn<'a>,
}

impl StepOps for NumericOps<'_> {
    type State = Tensor;

    fn rhs(&mut self, t: f64, x: &Tensor) -> Tensor {
        self.model.rhs_value(self.params, x, &(self.input)(t))
    }

    fn combine(&mut self, x: &Tensor, terms: &[(f64, &Tensor)]) -> Tensor {
        let mut out = x.clone();
        for &(c, k) in terms {
            if c != 0.0 {
                out.add_scaled(k, c);
            }
        }
        out
    }

    fn value<'a>(&'a self, x: &'a Tensor) -> &'a Tensor {
        x
    }
}

/// Records every stage on a graph.
pub struct GraphOps<'a> {
    pub graph: &'a mut Graph,
    pub model: &'a dyn OdeModel,
    pub theta: &'a [Var],
    pub input: InputFn<'a>,
}

impl StepOps for GraphOps<'_> {
    type State = Var;

    fn rhs(&mut self, t: f64, x: &Var) -> Var {
        let u = self.graph.constant((self.input)(t));
        self.model.rhs(self.graph, self.theta, *x, u)
    }

    fn combine(&mut self, x: &Var, terms: &[(f64, &Var)]) -> Var {
        let mut out = *x;
        for &(c, k) in terms {
            if c != 0.0 {
                let s = self.graph.scale(*k, c);
                out = self.graph.add(out, s);
            }
        }
        out
    }

    fn value<'a>(&'a self, x: &'a Var) -> &'a Tensor {
        self.graph.value(*x)
    }
}

fn check_times(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::Contract("need at least two output times".into()));
    }
    let dir = (times[1] - times[0]).signum();
    if dir == 0.0 || times.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) {
        return Err(Error::Contract("output times must be strictly monotone".into()));
    }
    Ok(dir)
}

fn check_state(x: &Tensor, t: f64) -> Result<()> {
    if x.data().iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT) {
        Ok(())
    } else {
        Err(Error::Divergence { t })
    }
}

/// Integrates from `times[0]` through every later output time (which may
/// decrease, for backward passes). Returns the state at each output time.
pub fn integrate<O: StepOps>(
    ops: &mut O,
    x0: O::State,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<O::State>, SolverStats)> {
    cfg.validate()?;
    let dir = check_times(times)?;
    check_state(ops.value(&x0), times[0])?;
    match cfg.method {
        Method::Euler => euler(ops, x0, times, cfg),
        Method::Dopri5 => dopri5(ops, x0, times, dir, cfg),
    }
}

fn euler<O: StepOps>(
    ops: &mut O,
    x0: O::State,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<O::State>, SolverStats)> {
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(times.len());
    let mut x = x0;
    out.push(x.clone());
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let n = match cfg.dt {
            Some(dt) => ((span.abs() / dt) - 1e-9).ceil().max(1.0) as usize,
            None => 1,
        };
        let h = span / n as f64;
        for i in 0..n {
            if stats.steps >= cfg.max_steps {
                return Err(Error::MaxSteps {
                    t: w[0] + i as f64 * h,
                    max_steps: cfg.max_steps,
                });
            }
            let t = w[0] + i as f64 * h;
            let k = ops.rhs(t, &x);
            x = ops.combine(&x, &[(h, &k)]);
            stats.steps += 1;
            stats.accepted += 1;
            stats.rhs_evals += 1;
            let t_next = if i + 1 == n { w[1] } else { t + h };
            check_state(ops.value(&x), t_next)?;
        }
        out.push(x.clone());
    }
    Ok((out, stats))
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand–Prince step. Returns the new state, its derivative (FSAL)
/// and the embedded error estimate.
fn dopri5_step<O: StepOps>(ops: &mut O, t: f64, x: &O::State, k1: &O::State, h: f64) -> (O::State, O::State, Tensor) {
    let mut k: Vec<O::State> = Vec::with_capacity(7);
    k.push(k1.clone());
    let mut x_new = x.clone();
    for s in 1..7 {
        let terms: Vec<(f64, &O::State)> = A[s].iter().zip(&k).map(|(&a, ks)| (h * a, ks)).collect();
        let xs = ops.combine(x, &terms);
        if s == 6 {
            x_new = xs.clone();
        }
        let ks = ops.rhs(t + C[s] * h, &xs);
        k.push(ks);
    }
    let mut err = Tensor::zeros(ops.value(x).shape().to_vec());
    for (e, ks) in E.iter().zip(&k) {
        if *e != 0.0 {
            err.add_scaled(ops.value(ks), h * e);
        }
    }
    let k7 = k.pop().expect("seven stages");
    (x_new, k7, err)
}

fn scaled_rms(e: &Tensor, x: &Tensor, x_new: &Tensor, cfg: &SolverConfig) -> f64 {
    let n = e.len().max(1) as f64;
    let sum: f64 = e
        .data()
        .iter()
        .zip(x.data().iter().zip(x_new.data()))
        .map(|(&ei, (&a, &b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (ei / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn rms(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    (values.map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt()
}

fn initial_step<O: StepOps>(ops: &mut O, t0: f64, x0: &O::State, f0: &O::State, dir: f64, cfg: &SolverConfig) -> f64 {
    let x = ops.value(x0).clone();
    let f = ops.value(f0).clone();
    let n = x.len();
    let sc: Vec<f64> = x.data().iter().map(|v| cfg.atol + v.abs() * cfg.rtol).collect();
    let d0 = rms(x.data().iter().zip(&sc).map(|(v, s)| v / s), n);
    let d1 = rms(f.data().iter().zip(&sc).map(|(v, s)| v / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let x1 = ops.combine(x0, &[(dir * h0, f0)]);
    let f1 = ops.rhs(t0 + dir * h0, &x1);
    let f1 = ops.value(&f1);
    let d2 = rms(
        f1.data().iter().zip(f.data()).zip(&sc).map(|((a, b), s)| (a - b) / s),
        n,
    ) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

fn dopri5<O: StepOps>(
    ops: &mut O,
    x0: O::State,
    times: &[f64],
    dir: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<O::State>, SolverStats)> {
    let mut stats = SolverStats::default();
    let mut out = Vec::with_capacity(times.len());
    let mut t = times[0];
    let mut x = x0;
    let mut k1 = ops.rhs(t, &x);
    stats.rhs_evals += 1;
    let mut h = initial_step(ops, t, &x, &k1, dir, cfg).min((times[times.len() - 1] - t).abs());
    stats.rhs_evals += 1;
    out.push(x.clone());
    for &t_out in &times[1..] {
        while (t_out - t) * dir > 0.0 {
            if h < cfg.min_step {
                return Err(Error::StepUnderflow { t, h });
            }
            if stats.steps >= cfg.max_steps {
                return Err(Error::MaxSteps {
                    t,
                    max_steps: cfg.max_steps,
                });
            }
            let remaining = (t_out - t).abs();
            let lands = h >= remaining;
            let h_try = if lands { remaining } else { h };
            let (x_new, k_new, e) = dopri5_step(ops, t, &x, &k1, dir * h_try);
            stats.steps += 1;
            stats.rhs_evals += 6;
            let err = scaled_rms(&e, ops.value(&x), ops.value(&x_new), cfg);
            let factor = if err == 0.0 {
                5.0
            } else if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                0.2
            };
            if err <= 1.0 {
                t = if lands { t_out } else { t + dir * h_try };
                x = x_new;
                k1 = k_new;
                stats.accepted += 1;
                check_state(ops.value(&x), t)?;
                h = if lands { h.max(h_try * factor) } else { h_try * factor };
            } else {
                stats.rejected += 1;
                h = h_try * factor;
            }
        }
        out.push(x.clone());
    }
    Ok((out, stats))
}

/// Integrates `model` from `x0` (`[rows, state_dim]`) through `times`.
pub fn rollout(
    model: &dyn OdeModel,
    params: &ParamSet,
    x0: &Tensor,
    input: InputFn,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Rollout> {
    let mut ops = NumericOps { model, params, input };
    let (states, stats) = integrate(&mut ops, x0.clone(), times, cfg)?;
    Ok(Rollout {
        times: times.to_vec(),
        states,
        stats,
    })
}

/// Mean squared difference over every output time, row and state component.
pub fn trajectory_mse(pred: &[Tensor], target: &[Tensor]) -> f64 {
    assert_eq!(pred.len(), target.len(), "trajectory length mismatch");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, y) in pred.iter().zip(target) {
        sum += p.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += p.len();
    }
    sum / n.max(1) as f64
}

/// Loss and parameter gradient from a rollout recorded on the graph.
///
/// `targets[k]` is the observed state at `times[k]`; `targets[0]` is the
/// initial condition. The loss is [`trajectory_mse`].
pub fn backprop_rollout_loss(
    model: &dyn OdeModel,
    params: &ParamSet,
    input: InputFn,
    times: &[f64],
    targets: &[Tensor],
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    assert_eq!(times.len(), targets.len(), "one target per output time");
    let mut g = Graph::new();
    let theta = params.leaves(&mut g);
    let x0 = g.constant(targets[0].clone());
    let states = {
        let mut ops = GraphOps {
            graph: &mut g,
            model,
            theta: &theta,
            input,
        };
        integrate(&mut ops, x0, times, cfg)?.0
    };
    let n: usize = targets.iter().map(Tensor::len).sum();
    let mut terms = Vec::with_capacity(states.len());
    for (x, y) in states.iter().zip(targets).skip(1) {
        let y = g.constant(y.clone());
        let d = g.sub(*x, y);
        terms.push(g.squared_norm(d));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let loss = g.scale(total, 1.0 / n as f64);
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), params.flat_gradient(&grads, &theta)))
}

/// Augmented backward system `(x, a, g)` packed into one `[1, N]` tensor.
struct AdjointOps<'a> {
    model: &'a dyn OdeModel,
    params: &'a ParamSet,
    input: InputFn<'a>,
    shape: Vec<usize>,
}

impl AdjointOps<'_> {
    fn pack(&self, x: &Tensor, a: &Tensor, grad: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(x.len() * 2 + grad.len());
        data.extend_from_slice(x.data());
        data.extend_from_slice(a.data());
        data.extend_from_slice(grad);
        Tensor::matrix(1, data.len(), data)
    }

    fn unpack(&self, z: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
        let n: usize = self.shape.iter().product();
        let d = z.data();
        (
            Tensor::new(self.shape.clone(), d[..n].to_vec()),
            Tensor::new(self.shape.clone(), d[n..2 * n].to_vec()),
            d[2 * n..].to_vec(),
        )
    }
}

impl StepOps for AdjointOps<'_> {
    type State = Tensor;

    fn rhs(&mut self, t: f64, z: &Tensor) -> Tensor {
        let (x, a, _) = self.unpack(z);
        let mut g = Graph::new();
        let theta = self.params.leaves(&mut g);
        let xv = g.leaf(x);
        let u = g.constant((self.input)(t));
        let f = self.model.rhs(&mut g, &theta, xv, u);
        let av = g.constant(a);
        let af = g.mul(av, f);
        let s = g.sum(af);
        let grads = g.backward(s).expect("scalar seed");
        let fx = g.value(f).clone();
        let a_dot = grads.get(xv).map(|v| -v);
        let g_dot: Vec<f64> = self.params.flat_gradient(&grads, &theta).into_iter().map(|v| -v).collect();
        self.pack(&fx, &a_dot, &g_dot)
    }

    fn combine(&mut self, x: &Tensor, terms: &[(f64, &Tensor)]) -> Tensor {
        let mut out = x.clone();
        for &(c, k) in terms {
            if c != 0.0 {
                out.add_scaled(k, c);
            }
        }
        out
    }

    fn value<'a>(&'a self, x: &'a Tensor) -> &'a Tensor {
        x
    }
}

/// Loss and parameter gradient by the adjoint method.
///
/// The forward pass keeps no graph. The backward pass integrates state,
/// adjoint and parameter-gradient together from the last output time to the
/// first, restarting the state from the forward value and adding the loss
/// gradient to the adjoint at every output time.
pub fn adjoint_gradient(
    model: &dyn OdeModel,
    params: &ParamSet,
    input: InputFn,
    times: &[f64],
    targets: &[Tensor],
    cfg: &SolverConfig,
) -> Result<(f64, Vec<f64>)> {
    assert_eq!(times.len(), targets.len(), "one target per output time");
    let forward = rollout(model, params, &targets[0], input, times, cfg)?;
    let loss = trajectory_mse(&forward.states, targets);
    let n: usize = targets.iter().map(Tensor::len).sum();
    let shape = targets[0].shape().to_vec();
    let mut ops = AdjointOps {
        model,
        params,
        input,
        shape,
    };
    let dl_dx = |k: usize| forward.states[k].zip_map(&targets[k], |p, y| 2.0 * (p - y) / n as f64);

    let last = times.len() - 1;
    let mut a = dl_dx(last);
    let mut grad = vec![0.0; params.size()];
    for k in (1..=last).rev() {
        let z = ops.pack(&forward.states[k], &a, &grad);
        let (zs, _) = integrate(&mut ops, z, &[times[k], times[k - 1]], cfg).map_err(|e| Error::AdjointInstability {
            t: match &e {
                Error::Divergence { t } | Error::StepUnderflow { t, .. } | Error::MaxSteps { t, .. } => *t,
                _ => times[k],
            },
            cause: e.to_string(),
        })?;
        let (_, a_back, g_back) = ops.unpack(&zs[1]);
        a = a_back;
        grad = g_back;
        a.add_scaled(&dl_dx(k - 1), 1.0);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `x' = theta * x` with one scalar parameter, or `x' = u` when forced.
    struct Linear {
        forced: bool,
    }

    impl OdeModel for Linear {
        fn state_dim(&self) -> usize {
            1
        }

        fn input_dim(&self) -> usize {
            1
        }

        fn init_params(&self, _rng: &mut dyn rand::RngCore) -> ParamSet {
            let mut p = ParamSet::new();
            p.push("theta", Tensor::vector(vec![1.0]));
            p
        }

        fn rhs(&self, g: &mut Graph, theta: &[Var], x: Var, u: Var) -> Var {
            if self.forced {
                u
            } else {
                g.mul_row(x, theta[0])
            }
        }
    }

    fn linear_params(theta: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("theta", Tensor::vector(vec![theta]));
        p
    }

    fn no_input(_t: f64) -> Tensor {
        Tensor::zeros(vec![1, 1])
    }

    fn scalar_rollout(theta: f64, x0: f64, times: &[f64], cfg: &SolverConfig) -> Result<Rollout> {
        rollout(
            &Linear { forced: false },
            &linear_params(theta),
            &Tensor::matrix(1, 1, vec![x0]),
            &no_input,
            times,
            cfg,
        )
    }

    #[test]
    fn euler_examples() {
        let r = scalar_rollout(-1.0, 1.0, &[0.0, 0.1], &SolverConfig::euler(None)).unwrap();
        assert_abs_diff_eq!(r.states[1].item(), 0.9, epsilon = 1e-15);

        let forcing = |_t: f64| Tensor::matrix(1, 1, vec![2.5]);
        let m = Linear { forced: true };
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 0.37).collect();
        let r = rollout(&m, &linear_params(0.0), &Tensor::matrix(1, 1, vec![1.0]), &forcing, &times, &SolverConfig::euler(Some(0.05)))
            .unwrap();
        for (t, x) in times.iter().zip(&r.states) {
            assert_abs_diff_eq!(x.item(), 1.0 + 2.5 * t, epsilon = 1e-12);
        }

        let times: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.1).collect();
        let cfg = SolverConfig::euler(None);
        match scalar_rollout(-25.0, 1.0, &times, &cfg) {
            Err(Error::Divergence { t }) => assert!(t < 100.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn euler_is_first_order() {
        let err = |dt: f64| {
            let r = scalar_rollout(1.0, 1.0, &[0.0, 1.0], &SolverConfig::euler(Some(dt))).unwrap();
            (r.states[1].item() - 1f64.exp()).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn dopri5_examples() {
        let cfg = SolverConfig::dopri5(1e-7, 1e-9);
        let r = scalar_rollout(1.0, 1.0, &[0.0, 1.0], &cfg).unwrap();
        assert_abs_diff_eq!(r.states[1].item(), 1f64.exp(), epsilon = 1e-6);

        let r = scalar_rollout(0.0, 3.0, &[0.0, 5.0, 100.0], &cfg).unwrap();
        assert!(r.states.iter().all(|x| x.item() == 3.0));
        assert_eq!(r.stats.rejected, 0);

        let m = Linear { forced: true };
        let cos = |t: f64| Tensor::matrix(1, 1, vec![t.cos()]);
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let r = rollout(&m, &linear_params(0.0), &Tensor::matrix(1, 1, vec![0.0]), &cos, &times, &cfg).unwrap();
        for (t, x) in times.iter().zip(&r.states) {
            assert_abs_diff_eq!(x.item(), t.sin(), epsilon = 1e-6);
        }
        assert_eq!(r.times, times);
    }

    #[test]
    fn dopri5_fixed_step_is_fifth_order() {
        let m = Linear { forced: false };
        let p = linear_params(1.0);
        let mut ops = NumericOps {
            model: &m,
            params: &p,
            input: &no_input,
        };
        let err = |ops: &mut NumericOps, n: usize| {
            let h = 1.0 / n as f64;
            let mut x = Tensor::matrix(1, 1, vec![1.0]);
            for i in 0..n {
                let k1 = ops.rhs(i as f64 * h, &x);
                x = dopri5_step(ops, i as f64 * h, &x, &k1, h).0;
            }
            (x.item() - 1f64.exp()).abs()
        };
        let ratio = err(&mut ops, 8) / err(&mut ops, 16);
        assert!((ratio.log2() - 5.0).abs() < 0.5, "observed order {}", ratio.log2());
    }

    #[test]
    fn dopri5_backward_in_time() {
        let cfg = SolverConfig::dopri5(1e-9, 1e-11);
        let r = scalar_rollout(1.0, 1f64.exp(), &[1.0, 0.5, 0.0], &cfg).unwrap();
        assert_abs_diff_eq!(r.states[2].item(), 1.0, epsilon = 1e-7);
    }

    #[test]
    fn step_underflow_and_max_steps() {
        let cfg = SolverConfig::dopri5(1e-7, 1e-9).with_min_step(0.5);
        assert!(matches!(scalar_rollout(-50.0, 1.0, &[0.0, 10.0], &cfg), Err(Error::StepUnderflow { .. })));
        let cfg = SolverConfig::dopri5(1e-7, 1e-9).with_max_steps(3);
        assert!(matches!(scalar_rollout(-50.0, 1.0, &[0.0, 10.0], &cfg), Err(Error::MaxSteps { .. })));
        assert!(SolverConfig::euler(Some(-1.0)).validate().is_err());
        assert!(scalar_rollout(1.0, 1.0, &[0.0, 0.0], &SolverConfig::euler(None)).is_err());
    }

    #[test]
    fn backprop_single_euler_step() {
        let (x0, theta, dt, y) = (0.7, -0.3, 0.2, 1.1);
        let targets = [Tensor::matrix(1, 1, vec![x0]), Tensor::matrix(1, 1, vec![y])];
        let (loss, grad) = backprop_rollout_loss(
            &Linear { forced: false },
            &linear_params(theta),
            &no_input,
            &[0.0, dt],
            &targets,
            &SolverConfig::euler(None),
        )
        .unwrap();
        let x1 = x0 + theta * x0 * dt;
        // mean over both output times, the first contributes zero
        assert_abs_diff_eq!(loss, (x1 - y).powi(2) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad[0], 2.0 * (x1 - y) * x0 * dt / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn adjoint_matches_closed_form_linear_sensitivity() {
        // x(t) = x0 e^{theta t}, dx/dtheta = t x(t)
        let (x0, theta) = (1.3, -0.4);
        let times = [0.0, 0.5, 1.0, 1.5];
        let targets: Vec<Tensor> = times
            .iter()
            .map(|&t| Tensor::matrix(1, 1, vec![if t == 0.0 { x0 } else { 0.9 * t }]))
            .collect();
        let cfg = SolverConfig::dopri5(1e-10, 1e-12);
        let (loss, grad) = adjoint_gradient(&Linear { forced: false }, &linear_params(theta), &no_input, &times, &targets, &cfg).unwrap();
        let n = times.len() as f64;
        let mut expected_loss = 0.0;
        let mut expected = 0.0;
        for (t, y) in times.iter().zip(&targets) {
            let x = x0 * (theta * t).exp();
            expected_loss += (x - y.item()).powi(2) / n;
            expected += 2.0 * (x - y.item()) * t * x / n;
        }
        assert_abs_diff_eq!(loss, expected_loss, epsilon = 1e-9);
        assert_abs_diff_eq!(grad[0], expected, epsilon = 1e-7);
    }

    #[test]
    fn adjoint_zero_mismatch_gives_zero_gradient() {
        let times = [0.0, 0.4, 0.8];
        let cfg = SolverConfig::dopri5(1e-9, 1e-11);
        let truth = scalar_rollout(0.6, 2.0, &times, &cfg).unwrap();
        let (loss, grad) = adjoint_gradient(&Linear { forced: false }, &linear_params(0.6), &no_input, &times, &truth.states, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0]);
    }

    #[test]
    fn adjoint_failure_is_reported() {
        let times = [0.0, 1.0];
        let targets = [Tensor::matrix(1, 1, vec![1.0]), Tensor::matrix(1, 1, vec![0.0])];
        // forward is stable, the backward system is not: adjoint grows like e^{-theta t}
        let cfg = SolverConfig::euler(Some(0.1));
        let out = adjoint_gradient(&Linear { forced: false }, &linear_params(-400.0), &no_input, &times, &targets, &cfg);
        assert!(matches!(out, Err(Error::Divergence { .. }) | Err(Error::AdjointInstability { .. })));
    }

    #[test]
    fn vehicle_backprop_matches_finite_differences() {
        use crate::models::{VehicleSurrogate, VehicleTrueParams};
        let model = VehicleSurrogate::new(5, VehicleTrueParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = model.init_params(&mut rng);
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let targets: Vec<Tensor> = times
            .iter()
            .map(|_| Tensor::matrix(2, 6, (0..12).map(|_| rng.gen_range(-0.5..0.5)).collect()))
            .collect();
        let input = |t: f64| Tensor::matrix(2, 3, vec![t.sin(), 0.0, 0.3, 0.5, 0.0, -t.cos()]);
        let cfg = SolverConfig::euler(None);
        let (_, grad) = backprop_rollout_loss(&model, &params, &input, &times, &targets, &cfg).unwrap();

        let flat = params.flatten();
        let loss_at = |v: &[f64]| {
            let mut p = params.clone();
            p.set_flat(v);
            let r = rollout(&model, &p, &targets[0], &input, &times, &cfg).unwrap();
            trajectory_mse(&r.states, &targets)
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..flat.len() {
            let mut up = flat.clone();
            up[i] += h;
            let mut down = flat.clone();
            down[i] -= h;
            let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            let diff = (fd - grad[i]).abs();
            if diff > 1e-9 {
                worst = worst.max(diff / fd.abs().max(grad[i].abs()));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn graph_and_numeric_rollouts_agree() {
        let model = Linear { forced: false };
        let p = linear_params(-0.8);
        let times = [0.0, 0.3, 1.1, 2.0];
        let cfg = SolverConfig::dopri5(1e-8, 1e-10);
        let plain = scalar_rollout(-0.8, 1.5, &times, &cfg).unwrap();
        let mut g = Graph::new();
        let theta = p.leaves(&mut g);
        let x0 = g.constant(Tensor::matrix(1, 1, vec![1.5]));
        let mut ops = GraphOps {
            graph: &mut g,
            model: &model,
            theta: &theta,
            input: &no_input,
        };
        let (states, stats) = integrate(&mut ops, x0, &times, &cfg).unwrap();
        assert_eq!(stats, plain.stats);
        for (v, x) in states.iter().zip(&plain.states) {
            assert_eq!(g.value(*v).item(), x.item());
        }
    }

    proptest! {
        #[test]
        fn dopri5_tracks_exponentials(theta in -2.0f64..1.0, x0 in -3.0f64..3.0, t1 in 0.1f64..3.0) {
            let r = scalar_rollout(theta, x0, &[0.0, t1], &SolverConfig::dopri5(1e-9, 1e-11)).unwrap();
            let exact = x0 * (theta * t1).exp();
            prop_assert!((r.states[1].item() - exact).abs() <= 1e-6 * exact.abs().max(1.0));
        }

        #[test]
        fn euler_step_is_explicit(theta in -2.0f64..2.0, x0 in -3.0f64..3.0, dt in 0.01f64..0.5) {
            let r = scalar_rollout(theta, x0, &[0.0, dt], &SolverConfig::euler(Some(dt))).unwrap();
            prop_assert!((r.states[1].item() - x0 * (1.0 + theta * dt)).abs() < 1e-12);
        }
    }
}

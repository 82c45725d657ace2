//! Right-hand sides: the true physics used to generate data, and the
//! gray-box surrogates whose sub-networks are trained.
//!
//! Every model implements [`OdeModel`], a batched right-hand side recorded on
//! an autodiff [`Graph`]. Rows of the state are independent evaluation
//! points, so the same code serves a batch of rollouts and a batch of
//! (sample, quadrature node) pairs.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{atan2_safe, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.into_data(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, index: usize) -> Tensor {
        let e = &self.entries[index];
        Tensor::new(e.shape.clone(), e.data.clone())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| self.tensor(i))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(Error::Contract(format!(
                "parameter {name} has shape {:?}, got {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        entry.data = tensor.into_data();
        Ok(())
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.size(), "flat parameter length mismatch");
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.data.len();
            e.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Records every tensor as a differentiable leaf.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        (0..self.len()).map(|i| g.leaf(self.tensor(i))).collect()
    }

    /// Records every tensor as a constant.
    pub fn constants(&self, g: &mut Graph) -> Vec<Var> {
        (0..self.len()).map(|i| g.constant(self.tensor(i))).collect()
    }

    /// Concatenated gradients of `vars` (as returned by [`leaves`](Self::leaves)).
    pub fn flat_gradient(&self, grads: &crate::autodiff::Gradients, vars: &[Var]) -> Vec<f64> {
        vars.iter().flat_map(|&v| grads.get(v).into_data()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|x| x.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: ParamSet = serde_json::from_str(s)?;
        for e in &set.entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Contract(format!(
                    "parameter {} has {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                )));
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Two-layer perceptron `W2 tanh(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub bias: bool,
    slot: usize,
}

impl Mlp {
    /// `slot` is the index of this network's first tensor in the model's [`ParamSet`].
    pub fn new(name: &str, input: usize, hidden: usize, output: usize, bias: bool, slot: usize) -> Self {
        Self {
            name: name.to_string(),
            input,
            hidden,
            output,
            bias,
            slot,
        }
    }

    pub fn tensor_count(&self) -> usize {
        if self.bias {
            4
        } else {
            2
        }
    }

    /// Uniform weights in `±1/sqrt(fan_in)`; biases get the same range.
    pub fn init(&self, rng: &mut dyn RngCore, params: &mut ParamSet) {
        assert_eq!(params.len(), self.slot, "networks must be initialised in slot order");
        let mut uniform = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        params.push(format!("{}.w1", self.name), uniform(vec![self.hidden, self.input], self.input));
        if self.bias {
            params.push(format!("{}.b1", self.name), uniform(vec![self.hidden], self.input));
        }
        params.push(format!("{}.w2", self.name), uniform(vec![self.output, self.hidden], self.hidden));
        if self.bias {
            params.push(format!("{}.b2", self.name), uniform(vec![self.output], self.hidden));
        }
    }

    pub fn forward(&self, g: &mut Graph, theta: &[Var], x: Var) -> Var {
        let p = &theta[self.slot..self.slot + self.tensor_count()];
        let (w1, b1, w2, b2) = if self.bias {
            (p[0], Some(p[1]), p[2], Some(p[3]))
        } else {
            (p[0], None, p[1], None)
        };
        let mut z = g.matmul_nt(x, w1);
        if let Some(b) = b1 {
            z = g.add_row(z, b);
        }
        let h = g.tanh(z);
        let mut out = g.matmul_nt(h, w2);
        if let Some(b) = b2 {
            out = g.add_row(out, b);
        }
        out
    }
}

/// A batched ODE right-hand side `f(x, u; theta)`.
///
/// `x` is `[rows, state_dim]`, `u` is `[rows, input_dim]`, the result is
/// `[rows, state_dim]`. Models with known dynamics have no parameters.
pub trait OdeModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Fresh parameters; empty for fully known dynamics.
    fn init_params(&self, _rng: &mut dyn RngCore) -> ParamSet {
        ParamSet::new()
    }

    fn rhs(&self, g: &mut Graph, theta: &[Var], x: Var, u: Var) -> Var;

    /// Plain evaluation without keeping a graph around.
    fn rhs_value(&self, params: &ParamSet, x: &Tensor, u: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let theta = params.constants(&mut g);
        let xv = g.constant(x.clone());
        let uv = g.constant(u.clone());
        let out = self.rhs(&mut g, &theta, xv, uv);
        g.value(out).clone()
    }
}

/// Physical constants of the planar vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrueParams {
    pub mass: f64,
    pub inertia: f64,
    pub damping: f64,
}

impl Default for VehicleTrueParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: 1.0,
            damping: 1.0,
        }
    }
}

impl VehicleTrueParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass > 0.0 && self.inertia > 0.0 && self.damping > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("vehicle constants must be positive: {self:?}")))
        }
    }

    fn inverse_mass_diagonal(&self) -> [f64; 3] {
        [1.0 / self.mass, 1.0 / self.mass, 1.0 / self.inertia]
    }
}

/// `d/dt (eta, v)` for state `(x, y, phi, v_x, v_y, omega)` and input
/// `u = (F_x, F_y, tau)`.
pub fn vehicle_rhs_true(state: &[f64; 6], u: &[f64; 3], params: &VehicleTrueParams) -> [f64; 6] {
    let [_, _, phi, vx, vy, w] = *state;
    let (s, c) = phi.sin_cos();
    let m = params.mass;
    // C(v) v with C = [[0, -m w, 0], [m w, 0, 0], [0, 0, 0]]
    let coriolis = [-m * w * vy, m * w * vx, 0.0];
    let kd = params.damping;
    [
        c * vx - s * vy,
        s * vx + c * vy,
        w,
        (u[0] - kd * vx - coriolis[0]) / m,
        (u[1] - kd * vy - coriolis[1]) / m,
        (u[2] - kd * w - coriolis[2]) / params.inertia,
    ]
}

/// The true vehicle dynamics as an [`OdeModel`] (no parameters).
#[derive(Clone, Debug, Default)]
pub struct VehicleTrue {
    pub params: VehicleTrueParams,
}

impl OdeModel for VehicleTrue {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        3
    }

    fn rhs(&self, g: &mut Graph, _theta: &[Var], x: Var, u: Var) -> Var {
        let rows = g.value(x).rows();
        let eta_phi = g.slice(x, 2, 3);
        let v = g.slice(x, 3, 6);
        let omega = g.slice(x, 5, 6);
        let s = g.sin(eta_phi);
        let c = g.cos(eta_phi);
        let ms = g.neg(s);
        let zero = g.constant(Tensor::zeros(vec![rows, 1]));
        let one = g.constant(Tensor::filled(vec![rows, 1], 1.0));
        let j = g.concat(&[c, ms, zero, s, c, zero, zero, zero, one]);
        let eta_dot = g.batch_matvec(j, v);

        let mw = g.scale(omega, self.params.mass);
        let mmw = g.neg(mw);
        let cmat = g.concat(&[zero, mmw, zero, mw, zero, zero, zero, zero, zero]);
        let cv = g.batch_matvec(cmat, v);
        let d = g.scale(v, self.params.damping);
        let f = g.sub(u, d);
        let f = g.sub(f, cv);
        let minv = g.constant(Tensor::vector(self.params.inverse_mass_diagonal().to_vec()));
        let v_dot = g.mul_row(f, minv);
        g.concat(&[eta_dot, v_dot])
    }

    fn rhs_value(&self, _params: &ParamSet, x: &Tensor, u: &Tensor) -> Tensor {
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * 6);
        for r in 0..rows {
            let s: [f64; 6] = x.row(r).try_into().expect("vehicle state has 6 entries");
            let ur: [f64; 3] = u.row(r).try_into().expect("vehicle input has 3 entries");
            out.extend_from_slice(&vehicle_rhs_true(&s, &ur, &self.params));
        }
        Tensor::matrix(rows, 6, out)
    }
}

/// Gray-box vehicle: `eta' = f_J(sin phi, cos phi) v`,
/// `v' = M^-1 (u - f_d(v) - f_C(v) v)` with the mass matrix known.
#[derive(Clone, Debug)]
pub struct VehicleSurrogate {
    pub known: VehicleTrueParams,
    pub f_j: Mlp,
    pub f_c: Mlp,
    pub f_d: Mlp,
}

impl VehicleSurrogate {
    pub fn new(hidden: usize, known: VehicleTrueParams) -> Self {
        let f_j = Mlp::new("f_j", 2, hidden, 9, true, 0);
        let f_c = Mlp::new("f_c", 3, hidden, 9, false, f_j.tensor_count());
        let f_d = Mlp::new("f_d", 3, hidden, 3, false, f_j.tensor_count() + f_c.tensor_count());
        Self { known, f_j, f_c, f_d }
    }
}

impl OdeModel for VehicleSurrogate {
    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        3
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParamSet {
        let mut p = ParamSet::new();
        self.f_j.init(rng, &mut p);
        self.f_c.init(rng, &mut p);
        self.f_d.init(rng, &mut p);
        p
    }

    fn rhs(&self, g: &mut Graph, theta: &[Var], x: Var, u: Var) -> Var {
        let phi = g.slice(x, 2, 3);
        let v = g.slice(x, 3, 6);
        let s = g.sin(phi);
        let c = g.cos(phi);
        let features = g.concat(&[s, c]);
        let j = self.f_j.forward(g, theta, features);
        let eta_dot = g.batch_matvec(j, v);

        let cmat = self.f_c.forward(g, theta, v);
        let cv = g.batch_matvec(cmat, v);
        let d = self.f_d.forward(g, theta, v);
        let f = g.sub(u, d);
        let f = g.sub(f, cv);
        let minv = g.constant(Tensor::vector(self.known.inverse_mass_diagonal().to_vec()));
        let v_dot = g.mul_row(f, minv);
        g.concat(&[eta_dot, v_dot])
    }
}

/// Which collision-avoidance law couples the agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AvoidanceForm {
    /// `(-k_vo e^{-d/l_s} e^{-|dphi_ij + pi/2|}, k_phi_o dphi_ij)`
    Training,
    /// `(-k_vo e^{-d/l_s}, k_phi_o dphi_ij)`
    Test,
}

/// Gains of the known multi-agent control and avoidance policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiAgentParams {
    pub n_agents: usize,
    pub k_v: f64,
    pub k_phi: f64,
    pub k_vo: f64,
    pub k_phi_o: f64,
    pub l_s: f64,
    pub form: AvoidanceForm,
    /// Whether the shared signal `w(t)` drives the agents.
    pub use_signal: bool,
}

impl MultiAgentParams {
    pub fn training(n_agents: usize) -> Self {
        Self {
            n_agents,
            k_v: 0.05,
            k_phi: 0.1,
            k_vo: 0.001,
            k_phi_o: 0.01,
            l_s: 0.01,
            form: AvoidanceForm::Training,
            use_signal: true,
        }
    }

    /// Evaluation configuration: stronger avoidance gains and `w = 0`.
    pub fn test(n_agents: usize) -> Self {
        Self {
            k_vo: 0.05,
            k_phi_o: 0.1,
            form: AvoidanceForm::Test,
            use_signal: false,
            ..Self::training(n_agents)
        }
    }

    /// Training with the evaluation gains and avoidance law, keeping `w(t)`.
    pub fn hard_gains(n_agents: usize) -> Self {
        Self {
            use_signal: true,
            ..Self::test(n_agents)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config("multi-agent scenario needs at least 2 agents".into()));
        }
        if self.l_s <= 0.0 {
            return Err(Error::Config("l_s must be positive".into()));
        }
        Ok(())
    }

    /// `K_c(eta_i)` for agent pose `(x, y, phi)`.
    pub fn control(&self, eta_i: [f64; 3]) -> [f64; 2] {
        let dphi = atan2_safe(-eta_i[1], -eta_i[0]) - eta_i[2];
        [self.k_v, self.k_phi * dphi]
    }

    /// `K_o(eta_i, eta_j)` (or `K_test` for [`AvoidanceForm::Test`]).
    pub fn avoidance(&self, eta_i: [f64; 3], eta_j: [f64; 3]) -> [f64; 2] {
        let dx = eta_i[0] - eta_j[0];
        let dy = eta_i[1] - eta_j[1];
        let dphi = atan2_safe(dy, dx) - eta_i[2];
        let d = dx.hypot(dy);
        let proximity = (-d / self.l_s).exp();
        let first = match self.form {
            AvoidanceForm::Training => -self.k_vo * proximity * (-(dphi + FRAC_PI_2).abs()).exp(),
            AvoidanceForm::Test => -self.k_vo * proximity,
        };
        [first, self.k_phi_o * dphi]
    }

    /// Commanded `(nu_i, omega_i)` for every agent, before the kinematics.
    pub fn velocities(&self, eta: &[f64], w: f64) -> Vec<[f64; 2]> {
        let n = self.n_agents;
        let pose = |i: usize| [eta[3 * i], eta[3 * i + 1], eta[3 * i + 2]];
        let w = if self.use_signal { w } else { 0.0 };
        (0..n)
            .map(|i| {
                let kc = self.control(pose(i));
                let mut acc = [0.0, 0.0];
                for j in (0..n).filter(|&j| j != i) {
                    let ko = self.avoidance(pose(i), pose(j));
                    acc[0] += ko[0];
                    acc[1] += ko[1];
                }
                let nf = n as f64;
                [
                    (w + kc[0] + acc[0] / nf).tanh(),
                    (w + kc[1] + acc[1] / nf).tanh(),
                ]
            })
            .collect()
    }
}

/// Plain evaluation of the true multi-agent dynamics for one state vector.
pub fn multiagent_rhs_true(eta: &[f64], w: f64, params: &MultiAgentParams) -> Vec<f64> {
    let vel = params.velocities(eta, w);
    let mut out = Vec::with_capacity(eta.len());
    for (i, v) in vel.iter().enumerate() {
        let (s, c) = eta[3 * i + 2].sin_cos();
        out.extend_from_slice(&[c * v[0], s * v[0], v[1]]);
    }
    out
}

#[derive(Clone, Debug)]
enum Kinematics {
    Analytic,
    Network(Mlp),
}

/// Multi-agent system `eta_i' = J(eta_i) tanh(w + K_c + mean_j K_o)`.
///
/// The analytic variant uses the true `3 x 2` kinematics matrix; the
/// surrogate replaces it with one network of `(sin phi_i, cos phi_i)` shared
/// by every agent.
#[derive(Clone, Debug)]
pub struct MultiAgentModel {
    pub params: MultiAgentParams,
    kinematics: Kinematics,
    pair_diff: Tensor,
    pair_owner: Tensor,
}

impl MultiAgentModel {
    pub fn analytic(params: MultiAgentParams) -> Self {
        Self::build(params, Kinematics::Analytic)
    }

    pub fn surrogate(params: MultiAgentParams, hidden: usize) -> Self {
        Self::build(params, Kinematics::Network(Mlp::new("f_j", 2, hidden, 6, true, 0)))
    }

    /// Same kinematics, different policy configuration.
    pub fn with_params(&self, params: MultiAgentParams) -> Self {
        assert_eq!(params.n_agents, self.params.n_agents, "agent count cannot change");
        Self {
            params,
            ..self.clone()
        }
    }

    fn build(params: MultiAgentParams, kinematics: Kinematics) -> Self {
        let n = params.n_agents;
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let np = pairs.len();
        let mut diff = vec![0.0; n * np];
        let mut owner = vec![0.0; n * np];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            diff[i * np + k] = 1.0;
            diff[j * np + k] = -1.0;
            owner[i * np + k] = 1.0;
        }
        Self {
            params,
            kinematics,
            pair_diff: Tensor::matrix(n, np, diff),
            pair_owner: Tensor::matrix(n, np, owner),
        }
    }
}

impl OdeModel for MultiAgentModel {
    fn state_dim(&self) -> usize {
        3 * self.params.n_agents
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn init_params(&self, rng: &mut dyn RngCore) -> ParamSet {
        let mut p = ParamSet::new();
        if let Kinematics::Network(net) = &self.kinematics {
            net.init(rng, &mut p);
        }
        p
    }

    fn rhs(&self, g: &mut Graph, theta: &[Var], x: Var, u: Var) -> Var {
        let p = &self.params;
        let n = p.n_agents;
        let rows = g.value(x).rows();
        let poses = g.reshape(x, vec![rows * n, 3]);
        let col = |g: &mut Graph, c: usize| {
            let s = g.slice(poses, c, c + 1);
            g.reshape(s, vec![rows, n])
        };
        let px = col(g, 0);
        let py = col(g, 1);
        let phi = col(g, 2);

        // K_c
        let mx = g.neg(px);
        let my = g.neg(py);
        let bearing = g.atan2(my, mx);
        let dphi_i = g.sub(bearing, phi);

        // K_o over ordered pairs (i, j), summed back onto i
        let diff = g.constant(self.pair_diff.clone());
        let owner = g.constant(self.pair_owner.clone());
        let dx = g.matmul(px, diff);
        let dy = g.matmul(py, diff);
        let phi_pair = g.matmul(phi, owner);
        let rel = g.atan2(dy, dx);
        let dphi_ij = g.sub(rel, phi_pair);
        let dist = g.hypot(dx, dy);
        let decay = g.scale(dist, -1.0 / p.l_s);
        let mut ko1 = g.exp(decay);
        if p.form == AvoidanceForm::Training {
            let shifted = g.add_scalar(dphi_ij, FRAC_PI_2);
            let a = g.abs(shifted);
            let a = g.neg(a);
            let heading = g.exp(a);
            ko1 = g.mul(ko1, heading);
        }
        let ko1 = g.scale(ko1, -p.k_vo);
        let ko2 = g.scale(dphi_ij, p.k_phi_o);
        let inv_n = 1.0 / n as f64;
        let sum1 = g.matmul_nt(ko1, owner);
        let sum1 = g.scale(sum1, inv_n);
        let sum2 = g.matmul_nt(ko2, owner);
        let sum2 = g.scale(sum2, inv_n);

        let mut nu = g.add_scalar(sum1, p.k_v);
        let steer = g.scale(dphi_i, p.k_phi);
        let mut om = g.add(steer, sum2);
        if p.use_signal {
            let ones = g.constant(Tensor::filled(vec![1, n], 1.0));
            let w = g.matmul(u, ones);
            nu = g.add(nu, w);
            om = g.add(om, w);
        }
        let nu = g.tanh(nu);
        let om = g.tanh(om);
        let nu = g.reshape(nu, vec![rows * n, 1]);
        let om = g.reshape(om, vec![rows * n, 1]);
        let vel = g.concat(&[nu, om]);

        let heading = g.slice(poses, 2, 3);
        let s = g.sin(heading);
        let c = g.cos(heading);
        let jmat = match &self.kinematics {
            Kinematics::Analytic => {
                let zero = g.constant(Tensor::zeros(vec![rows * n, 1]));
                let one = g.constant(Tensor::filled(vec![rows * n, 1], 1.0));
                g.concat(&[c, zero, s, zero, zero, one])
            }
            Kinematics::Network(net) => {
                let features = g.concat(&[s, c]);
                net.forward(g, theta, features)
            }
        };
        let eta_dot = g.batch_matvec(jmat, vel);
        g.reshape(eta_dot, vec![rows, 3 * n])
    }

    fn rhs_value(&self, params: &ParamSet, x: &Tensor, u: &Tensor) -> Tensor {
        if !matches!(self.kinematics, Kinematics::Analytic) {
            let mut g = Graph::new();
            let theta = params.constants(&mut g);
            let xv = g.constant(x.clone());
            let uv = g.constant(u.clone());
            let out = self.rhs(&mut g, &theta, xv, uv);
            return g.value(out).clone();
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            out.extend(multiagent_rhs_true(x.row(r), u.row(r)[0], &self.params));
        }
        Tensor::matrix(rows, x.cols(), out)
    }
}

//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion to stderr (uncaptured) and then asserts it.
//!
//! Tests share one lock so that the timing comparison runs alone on the machine.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snode::autodiff::{gradient_check, Graph, Tensor, Var};
use snode::harness::{self, ExperimentConfig, MethodKind, RunArtifacts};
use snode::models::{MultiAgentModel, MultiAgentParams, OdeModel, ParamSet, VehicleSurrogate, VehicleTrueParams};
use snode::scenarios::{self, ScenarioConfig, ScenarioKind};
use snode::solvers::{self, SolverConfig};
use snode::spectral::CollocationGrid;
use snode::train::{self, SpectralProblem, TrainingData, TrajectoryDecision};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str, started: Instant) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance] criterion {id:>2} {name}: {verdict} ({detail}) [{:.1} s]\n",
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// shared experiment runs

fn run_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn experiment(scenario: ScenarioKind, method: MethodKind, seed: u64, overrides: &[&str]) -> RunArtifacts {
    static CACHE: OnceLock<Mutex<HashMap<String, RunArtifacts>>> = OnceLock::new();
    let key = format!("{}-{}-{seed}-{}", scenario.name(), method.name(), overrides.join("-"));
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return hit.clone();
    }
    let mut cfg = ExperimentConfig::default();
    cfg.scenario = ScenarioConfig::new(scenario);
    cfg.method = method;
    cfg.seed = seed;
    cfg.workers = 1;
    cfg.out_dir = run_dir().join(key.replace(['=', '.'], "_"));
    for kv in overrides {
        cfg.apply_override(kv).unwrap();
    }
    let art = harness::run(&cfg).unwrap_or_else(|e| panic!("{key}: {e}"));
    cache.lock().unwrap().insert(key, art.clone());
    art
}

/// Desk-scale vehicle runs: batch 20, otherwise defaults.
fn vehicle(method: MethodKind, seed: u64) -> RunArtifacts {
    experiment(ScenarioKind::Vehicle, method, seed, &["batch=20"])
}

fn mse_or_inf(a: &RunArtifacts) -> f64 {
    a.summary.test_mse.unwrap_or(f64::INFINITY)
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_spectral_exactness() {
    let _g = serial();
    let start = Instant::now();
    let p = 14;
    let grid = CollocationGrid::on_window(p, 0.0, 10.0).unwrap();

    let mut quad_err: f64 = 0.0;
    for k in 0..2 * p {
        let values: Vec<f64> = grid.nodes().iter().map(|t| t.powi(k as i32)).collect();
        let exact = 10f64.powi(k as i32 + 1) / (k as f64 + 1.0);
        quad_err = quad_err.max((grid.integrate(&values).unwrap() - exact).abs() / exact);
    }

    let mut diff_err: f64 = 0.0;
    for k in 0..=p {
        let values: Vec<f64> = grid.nodes().iter().map(|t| (t / 10.0).powi(k as i32)).collect();
        let d = grid.differentiate(&values).unwrap();
        for (q, t) in grid.nodes().iter().enumerate() {
            let exact = if k == 0 { 0.0 } else { k as f64 / 10.0 * (t / 10.0).powi(k as i32 - 1) };
            diff_err = diff_err.max((d[q] - exact).abs());
        }
    }

    let exp_err = |p: usize| {
        let g = CollocationGrid::on_window(p, 0.0, 1.0).unwrap();
        let values: Vec<f64> = g.nodes().iter().map(|t| t.exp()).collect();
        let coeffs = g.values_to_coeffs(&values).unwrap();
        (0..500)
            .map(|i| {
                let t = (i as f64 + 0.5) / 500.0;
                (g.basis().interpolate(&coeffs, t).unwrap() - t.exp()).abs()
            })
            .fold(0.0, f64::max)
    };
    let errs: Vec<f64> = [4, 6, 8, 10, 12, 14].into_iter().map(exp_err).collect();
    // geometric: every +2 in order gains at least a factor 10
    let geometric = errs.windows(2).all(|w| w[1] <= w[0] / 10.0 || w[1] < 1e-14);

    let pass = quad_err <= 1e-9 && diff_err <= 1e-8 && geometric && errs[5] <= 1e-10;
    let detail = format!(
        "quadrature rel err {quad_err:.1e} <= 1e-9, differentiation err {diff_err:.1e} <= 1e-8, exp interpolation errors {} (p=14 <= 1e-10)",
        errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>().join(" > ")
    );
    assert!(report(1, "spectral exactness", pass, &detail, start), "{detail}");
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Relative norm error of the reverse-mode parameter and state gradients of
/// `|f(x, u)|^2` against central differences of the plain evaluation.
fn model_gradient_error(model: &dyn OdeModel, params: &ParamSet, x: &Tensor, u: &Tensor) -> f64 {
    let mut g = Graph::new();
    let theta = params.leaves(&mut g);
    let xv = g.leaf(x.clone());
    let uv = g.constant(u.clone());
    let f = model.rhs(&mut g, &theta, xv, uv);
    let loss = g.squared_norm(f);
    let grads = g.backward(loss).unwrap();
    let g_theta = params.flat_gradient(&grads, &theta);
    let g_x = grads.get(xv);

    let objective = |p: &ParamSet, x: &Tensor| model.rhs_value(p, x, u).data().iter().map(|v| v * v).sum::<f64>();
    let h = 1e-6;
    let flat = params.flatten();
    let mut p = params.clone();
    let mut fd_theta = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let mut v = flat.clone();
        v[i] += h;
        p.set_flat(&v);
        let plus = objective(&p, x);
        v[i] -= 2.0 * h;
        p.set_flat(&v);
        let minus = objective(&p, x);
        fd_theta[i] = (plus - minus) / (2.0 * h);
    }
    let mut fd_x = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        fd_x[i] = (objective(params, &xp) - objective(params, &xm)) / (2.0 * h);
    }
    rel_diff(&g_theta, &fd_theta).max(rel_diff(g_x.data(), &fd_x))
}

#[test]
fn criterion_02_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut prim_worst: f64 = 0.0;
    for _ in 0..50 {
        let a = random_tensor(&mut rng, vec![3, 4], 1.0);
        let b = random_tensor(&mut rng, vec![3, 4], 1.0);
        let m = random_tensor(&mut rng, vec![4, 2], 1.0);
        let row = random_tensor(&mut rng, vec![4], 1.0);
        let mats = random_tensor(&mut rng, vec![3, 8], 1.0);
        let vecs = random_tensor(&mut rng, vec![3, 2], 1.0);
        let cst = |g: &mut Graph, t: &Tensor| g.constant(t.clone());
        let checks: Vec<Box<dyn Fn(&mut Graph, Var) -> Var>> = vec![
            Box::new(|g, x| { let c = cst(g, &b); let y = g.add(x, c); g.squared_norm(y) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.sub(c, x); g.squared_norm(y) }),
            Box::new(|g, x| { let y = g.mul(x, x); g.sum(y) }),
            Box::new(|g, x| { let y = g.scale(x, -2.5); g.squared_norm(y) }),
            Box::new(|g, x| { let y = g.add_scalar(x, 0.3); g.squared_norm(y) }),
            Box::new(|g, x| { let c = cst(g, &m); let y = g.matmul(x, c); g.squared_norm(y) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.matmul_nt(x, c); g.squared_norm(y) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.matmul_nt(c, x); g.squared_norm(y) }),
            Box::new(|g, x| { let y = g.tanh(x); g.squared_norm(y) }),
            Box::new(|g, x| { let y = g.sin(x); g.sum(y) }),
            Box::new(|g, x| { let y = g.cos(x); g.sum(y) }),
            Box::new(|g, x| { let y = g.exp(x); g.sum(y) }),
            Box::new(|g, x| { let y = g.abs(x); let z = g.mul(y, y); g.sum(z) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.atan2(x, c); g.squared_norm(y) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.atan2(c, x); g.sum(y) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.hypot(x, c); g.sum(y) }),
            Box::new(|g, x| { let c = cst(g, &b); let y = g.concat(&[c, x]); let z = g.tanh(y); g.sum(z) }),
            Box::new(|g, x| { let y = g.slice(x, 1, 3); let z = g.tanh(y); g.sum(z) }),
            Box::new(|g, x| { let r = cst(g, &row); let y = g.mul_row(x, r); g.squared_norm(y) }),
            Box::new(|g, x| { let r = cst(g, &row); let y = g.add_row(x, r); let z = g.tanh(y); g.sum(z) }),
            Box::new(|g, x| { let y = g.reshape(x, vec![6, 2]); let z = g.tanh(y); g.squared_norm(z) }),
        ];
        for f in &checks {
            prim_worst = prim_worst.max(gradient_check(f, &a, 1e-6));
        }
        prim_worst = prim_worst.max(gradient_check(|g, x| { let c = g.constant(a.clone()); let y = g.mul_row(c, x); let z = g.tanh(y); g.sum(z) }, &row, 1e-6));
        prim_worst = prim_worst.max(gradient_check(|g, x| { let c = g.constant(vecs.clone()); let z = g.batch_matvec(x, c); g.squared_norm(z) }, &mats, 1e-6));
        prim_worst = prim_worst.max(gradient_check(|g, x| { let c = g.constant(mats.clone()); let z = g.batch_matvec(c, x); let t = g.tanh(z); g.sum(t) }, &vecs, 1e-6));
    }

    let vehicle = VehicleSurrogate::new(16, VehicleTrueParams::default());
    let agents = MultiAgentModel::surrogate(MultiAgentParams::test(3), 8);
    let mut model_worst = [0.0f64; 2];
    for (k, (model, scale)) in [(&vehicle as &dyn OdeModel, 1.0), (&agents, 3.0)].into_iter().enumerate() {
        for _ in 0..50 {
            let params = model.init_params(&mut rng);
            let x = random_tensor(&mut rng, vec![2, model.state_dim()], scale);
            let u = random_tensor(&mut rng, vec![2, model.input_dim()], 0.5);
            model_worst[k] = model_worst[k].max(model_gradient_error(model, &params, &x, &u));
        }
    }
    let pass = prim_worst < 1e-5 && model_worst.iter().all(|e| *e < 1e-5);
    let detail = format!(
        "worst relative error: primitives {prim_worst:.1e}, vehicle surrogate {:.1e}, multi-agent surrogate {:.1e}; bound 1e-5 at 50 points each",
        model_worst[0], model_worst[1]
    );
    assert!(report(2, "gradient correctness", pass, &detail, start), "{detail}");
}

#[test]
fn criterion_03_adjoint_consistency() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ScenarioConfig {
        batch: 20,
        ..ScenarioConfig::new(ScenarioKind::Vehicle)
    };
    let ds = scenarios::generate(&cfg, 0).unwrap();
    let input = ds.input_fn();
    let data = ds.training_data(&input);
    let model = cfg.surrogate();
    let euler = SolverConfig::euler(Some(cfg.euler_dt()));
    // gradients at the parameters a δ-SNODE run reaches, the regime where the
    // baselines are compared during training
    let params = vehicle(MethodKind::DeltaSnode, 0).params;
    let (lb, gb) = solvers::backprop_rollout_loss(model.as_ref(), &params, &input, &data.times, &data.targets, &euler).unwrap();
    let (la, ga) = solvers::adjoint_gradient(model.as_ref(), &params, &input, &data.times, &data.targets, &euler).unwrap();
    let rel = rel_diff(&ga, &gb);
    let pass = rel <= 0.02 && (la - lb).abs() <= 1e-12 * lb.abs().max(1.0);
    let detail = format!("|g_adj - g_bkpr| / |g_bkpr| = {:.2}% <= 2% (Euler at the data spacing, loss {lb:.3e})", rel * 100.0);
    assert!(report(3, "adjoint consistency", pass, &detail, start), "{detail}");
}

#[test]
fn criterion_04_residual_zero_oracle() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ScenarioConfig::new(ScenarioKind::Vehicle);
    let model = cfg.surrogate();
    let grid = CollocationGrid::on_window(14, 0.0, cfg.horizon).unwrap();
    let batch = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<_> = (0..batch)
        .map(|_| {
            [0, 1].map(|_| snode::spectral::FourierInputBasis::decaying(cfg.harmonics, cfg.amplitude(), cfg.period, &mut rng).unwrap())
        })
        .collect();
    let input = move |t: f64| {
        Tensor::matrix(batch, 3, inputs.iter().flat_map(|[a, b]| [a.eval(t), 0.0, b.eval(t)]).collect())
    };
    let tight = SolverConfig::dopri5(1e-12, 1e-14).with_min_step(1e-14).with_max_steps(10_000_000);
    let worst_residual = |scale: f64, rng: &mut ChaCha8Rng| {
        let mut worst: f64 = 0.0;
        for seed in 0..5 {
            let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(100 + seed));
            params.set_flat(&params.flatten().iter().map(|v| v * scale).collect::<Vec<_>>());
            let x0 = random_tensor(rng, vec![batch, 6], 0.5);
            let roll = solvers::rollout(model.as_ref(), &params, &x0, &input, grid.nodes(), &tight).unwrap();
            let k = grid.len();
            let mut values = vec![0.0; batch * k * 6];
            for (q, state) in roll.states.iter().enumerate() {
                for b in 0..batch {
                    for s in 0..6 {
                        values[(b * k + q) * 6 + s] = state.get(b, s);
                    }
                }
            }
            let x = TrajectoryDecision::new(Tensor::matrix(batch * k, 6, values), batch);
            let data = TrainingData {
                times: grid.nodes().to_vec(),
                targets: roll.states.clone(),
                input: &input,
            };
            let problem = SpectralProblem::new(model.as_ref(), grid.clone(), &data, true).unwrap();
            worst = worst.max(problem.residual(&x, &params, false, false).value);
        }
        worst
    };
    // At the full init scale the untrained networks drive states to ~1e4 within
    // T = 10, far beyond what a degree-14 interpolant resolves.
    let worst = worst_residual(0.1, &mut rng);
    let unresolved = worst_residual(1.0, &mut rng);
    let pass = worst <= 1e-6;
    let detail = format!(
        "max weighted residual over 5 random parameter sets at 0.1x init scale {worst:.2e} <= 1e-6 (p=14, T=10); at full init scale {unresolved:.2e}"
    );
    assert!(report(4, "residual-zero oracle", pass, &detail, start), "{detail}");
}

#[test]
fn criterion_05_06_vehicle_reproduction_and_speed() {
    let _g = serial();
    let start = Instant::now();
    let methods = [MethodKind::AlphaSnode, MethodKind::DeltaSnode, MethodKind::BkprDopri5, MethodKind::BkprEuler];
    let mut lines = Vec::new();
    let mut ordered_seeds = 0;
    let mut losses_ok = true;
    let mut seeds_run = 0;
    for seed in 0..3u64 {
        // the ordering needs 2 of 3 seeds; the third is only run when it decides the outcome
        if seed == 2 && (ordered_seeds == 2 || ordered_seeds == 0) {
            break;
        }
        seeds_run += 1;
        let runs: Vec<RunArtifacts> = methods.iter().map(|m| vehicle(*m, seed)).collect();
        let mse: Vec<f64> = runs.iter().map(mse_or_inf).collect();
        let ordered = mse.windows(2).all(|w| w[0] < w[1]);
        ordered_seeds += ordered as usize;
        let delta = &runs[1].summary;
        let alpha = &runs[0].summary;
        let delta_ok = delta.iterations <= 500 && delta.final_loss.is_some_and(|l| l <= 0.05);
        let alpha_ok = alpha.iterations <= 150 && alpha.final_loss.is_some_and(|l| l <= 0.05);
        losses_ok &= delta_ok && alpha_ok;
        lines.push(format!(
            "seed {seed}: test MSE alpha {:.3e} < delta {:.3e} < bkpr_dopri5 {:.3e} < bkpr_euler {:.3e} -> {}; loss delta {:.2e} @{} it, alpha {:.2e} @{} ep",
            mse[0],
            mse[1],
            mse[2],
            mse[3],
            if ordered { "ordered" } else { "not ordered" },
            delta.final_loss.unwrap_or(f64::NAN),
            delta.iterations,
            alpha.final_loss.unwrap_or(f64::NAN),
            alpha.iterations
        ));
    }
    let pass5 = losses_ok && ordered_seeds >= 2;
    let detail = format!("{}; ordering on {ordered_seeds}/{seeds_run} seeds run, need 2 of 3", lines.join("; "));
    let ok5 = report(5, "vehicle reproduction", pass5, &detail, start);

    let start = Instant::now();
    let delta = vehicle(MethodKind::DeltaSnode, 0).summary.mean_ms_per_iteration;
    let dopri = vehicle(MethodKind::BkprDopri5, 0).summary.mean_ms_per_iteration;
    let ratio = dopri / delta;
    let detail6 = format!("delta_snode {delta:.2} ms/it vs bkpr_dopri5 {dopri:.2} ms/it: {ratio:.1}x >= 5x");
    let ok6 = report(6, "relative speed", ratio >= 5.0, &detail6, start);
    assert!(ok5, "{detail}");
    assert!(ok6, "{detail6}");
}

#[test]
fn criterion_07_low_data() {
    let _g = serial();
    let start = Instant::now();
    let low = ["batch=20", "data_fraction=0.25"];
    let alpha = experiment(ScenarioKind::Vehicle, MethodKind::AlphaSnode, 0, &low);
    let euler = experiment(ScenarioKind::Vehicle, MethodKind::BkprEuler, 0, &low);
    let loss = alpha.summary.final_loss.unwrap_or(f64::INFINITY);
    let ratio = mse_or_inf(&euler) / mse_or_inf(&alpha);
    let pass = loss <= 0.05 && ratio >= 5.0;
    let detail = format!(
        "25% data: alpha final loss {loss:.2e} <= 0.05; test MSE alpha {:.3e} vs bkpr_euler {:.3e} ({}): {ratio:.1}x >= 5x",
        mse_or_inf(&alpha),
        mse_or_inf(&euler),
        euler.summary.outcome
    );
    assert!(report(7, "low-data robustness", pass, &detail, start), "{detail}");
}

#[test]
fn criterion_08_multiagent_hard_gains() {
    let _g = serial();
    let start = Instant::now();
    let hard = ["n_agents=5", "batch=20", "max_iters=200"];
    let run = |m| experiment(ScenarioKind::MultiagentHardGains, m, 0, &hard);
    let mut parts = Vec::new();
    let mut pass = true;
    for m in [MethodKind::DeltaSnode, MethodKind::AlphaSnode] {
        let s = run(m).summary;
        let (l0, l1) = (s.initial_loss.unwrap_or(f64::NAN), s.final_loss.unwrap_or(f64::INFINITY));
        let ok = l1 < 0.5 * l0;
        pass &= ok;
        parts.push(format!("{} loss {l0:.3e} -> {l1:.3e} ({:.3}% of initial, need < 50%)", s.method, 100.0 * l1 / l0));
    }
    for m in [MethodKind::BkprEuler, MethodKind::AdjEuler] {
        let art = run(m);
        let s = &art.summary;
        let first = art.report.records.first().map_or(f64::NAN, |r| r.combined);
        let best = art.report.records.iter().map(|r| r.combined).fold(f64::INFINITY, f64::min);
        let stalled = s.failed() || best >= 0.9 * first;
        pass &= stalled;
        parts.push(format!(
            "{} {} loss {first:.3e} -> best {best:.3e} ({:.3}% of initial, need >= 90% or Fail)",
            s.method,
            s.outcome,
            100.0 * best / first
        ));
    }
    let detail = parts.join("; ");
    assert!(report(8, "multi-agent hard gains", pass, &detail, start), "{detail}");
}

/// `x' = lambda x` with `lambda` as the only parameter.
struct Linear;

impl OdeModel for Linear {
    fn state_dim(&self) -> usize {
        1
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn init_params(&self, _rng: &mut dyn rand::RngCore) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("lambda", Tensor::vector(vec![0.5]));
        p
    }

    fn rhs(&self, g: &mut Graph, theta: &[Var], x: Var, _u: Var) -> Var {
        g.mul_row(x, theta[0])
    }
}

#[test]
fn criterion_09_horizon_independent_gradients() {
    let _g = serial();
    let start = Instant::now();
    let grad_norm = |horizon: f64| {
        let cfg = ScenarioConfig {
            batch: 10,
            horizon,
            n_points: (horizon * 10.0) as usize,
            ..ScenarioConfig::new(ScenarioKind::Vehicle)
        };
        let ds = scenarios::generate(&cfg, 9).unwrap();
        let input = ds.input_fn();
        let data = ds.training_data(&input);
        let model = cfg.surrogate();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let grid = CollocationGrid::on_window(14, 0.0, horizon).unwrap();
        let problem = SpectralProblem::new(model.as_ref(), grid.clone(), &data, true).unwrap();
        let x = train::init_trajectory(&data, &grid, 0.0, 0).unwrap();
        norm(&problem.residual(&x, &params, false, true).grad_theta.unwrap())
    };
    let (g1, g2) = (grad_norm(10.0), grad_norm(20.0));
    let spectral_ratio = g2 / g1;

    let model = Linear;
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let input = |_t: f64| Tensor::matrix(1, 1, vec![0.0]);
    let euler = SolverConfig::euler(Some(1.0));
    let bptt = |steps: usize| {
        let times = [0.0, steps as f64];
        let targets = [Tensor::matrix(1, 1, vec![1.0]), Tensor::matrix(1, 1, vec![0.0])];
        let (_, g) = solvers::backprop_rollout_loss(&model, &params, &input, &times, &targets, &euler).unwrap();
        norm(&g)
    };
    let per_doubling: Vec<f64> = [8, 16].into_iter().map(|n| bptt(2 * n) / bptt(n)).collect();
    let pass = spectral_ratio <= 10.0 && per_doubling.iter().all(|r| *r >= 100.0);
    let detail = format!(
        "|dR/dtheta| T=10 {g1:.3e}, T=20 {g2:.3e}: ratio {spectral_ratio:.2} <= 10; Euler BPTT (lambda dt = 0.5) ratio per doubling {:.1e} (8->16), {:.1e} (16->32) >= 100",
        per_doubling[0], per_doubling[1]
    );
    assert!(report(9, "horizon-independent gradients", pass, &detail, start), "{detail}");
}

#[test]
fn criterion_10_failure_reporting() {
    let _g = serial();
    let start = Instant::now();
    let art = experiment(
        ScenarioKind::MultiagentHardGains,
        MethodKind::BkprDopri5,
        0,
        &["n_agents=5", "batch=20", "max_iters=20"],
    );
    let s = &art.summary;
    let written = harness::load_summary(&art.summary_path).map(|l| l == *s).unwrap_or(false);
    let underflow = s.fail_reason.as_deref().is_some_and(|r| r.contains("underflow"));
    let pass = s.failed() && underflow && written && s.fail_iteration.is_some();
    let detail = format!(
        "bkpr_dopri5 on multiagent_hard_gains: outcome {}, reason {}, {} iterations, summary written {written}",
        s.outcome,
        s.fail_reason.as_deref().unwrap_or("none"),
        s.iterations
    );
    assert!(report(10, "failure reporting", pass, &detail, start), "{detail}");
}

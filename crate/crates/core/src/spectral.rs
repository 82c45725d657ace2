//! Legendre series on a single time window.
//!
//! A trajectory on `[t0, t1]` is represented either by its values at the
//! `p + 1` Gauss-Lobatto nodes or by the coefficients of its truncated
//! Legendre series. [`CollocationGrid`] holds the matrices that move between
//! the two views and differentiate in node space:
//!
//! * `M[q][i] = P_i(s_q)` maps coefficients to node values,
//! * `D[q][i] = P_i'(s_q) * 2 / (t1 - t0)` maps coefficients to node derivatives,
//! * `Dhat = D * M^-1` differentiates node values directly.
//!
//! The first node is `t0`, so clamping node 0 enforces the initial condition.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DOMAIN_SLACK: f64 = 1e-12;
const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX_ITERS: usize = 100;

fn check_reference_point(s: f64) -> Result<()> {
    if !s.is_finite() || s.abs() > 1.0 + DOMAIN_SLACK {
        return Err(Error::Domain(format!("point {s} outside [-1, 1]")));
    }
    Ok(())
}

/// Values `P_0(s) ..= P_p(s)` from the three-term recurrence.
pub fn legendre_eval(p: usize, s: f64) -> Result<Vec<f64>> {
    check_reference_point(s)?;
    Ok(legendre_unchecked(p, s))
}

fn legendre_unchecked(p: usize, s: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(p + 1);
    out.push(1.0);
    if p >= 1 {
        out.push(s);
    }
    for k in 1..p {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * s * out[k] - kf * out[k - 1]) / (kf + 1.0);
        out.push(next);
    }
    out
}

/// Derivatives `P_0'(s) ..= P_p'(s)`, using `P_{k+1}' = P_{k-1}' + (2k + 1) P_k`.
pub fn legendre_deriv(p: usize, s: f64) -> Result<Vec<f64>> {
    check_reference_point(s)?;
    Ok(legendre_deriv_unchecked(p, s))
}

fn legendre_deriv_unchecked(p: usize, s: f64) -> Vec<f64> {
    let values = legendre_unchecked(p, s);
    let mut out = Vec::with_capacity(p + 1);
    out.push(0.0);
    if p >= 1 {
        out.push(1.0);
    }
    for k in 1..p {
        let next = out[k - 1] + (2.0 * k as f64 + 1.0) * values[k];
        out.push(next);
    }
    out
}

/// Gauss-Lobatto nodes and weights on `[-1, 1]` for order `p`.
///
/// Interior nodes are the roots of `P_p'`, found by Newton iteration from the
/// Chebyshev-Lobatto points. Weights are `2 / (p (p + 1) P_p(s)^2)`.
pub fn gauss_lobatto(p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if p == 0 {
        return Err(Error::Domain("Gauss-Lobatto order must be at least 1".into()));
    }
    let pf = p as f64;
    let mut nodes = vec![0.0; p + 1];
    nodes[0] = -1.0;
    nodes[p] = 1.0;
    for (j, node) in nodes.iter_mut().enumerate().take(p).skip(1) {
        let mut s = -(PI * j as f64 / pf).cos();
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITERS {
            let values = legendre_unchecked(p, s);
            let derivs = legendre_deriv_unchecked(p, s);
            // Legendre ODE: (1 - s^2) P'' = 2 s P' - p (p + 1) P
            let second = (2.0 * s * derivs[p] - pf * (pf + 1.0) * values[p]) / (1.0 - s * s);
            let step = derivs[p] / second;
            s -= step;
            if step.abs() < NEWTON_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "Gauss-Lobatto Newton iteration did not converge for node {j} of order {p}"
            )));
        }
        *node = s;
    }
    let weights = nodes
        .iter()
        .map(|&s| {
            let pp = legendre_unchecked(p, s)[p];
            2.0 / (pf * (pf + 1.0) * pp * pp)
        })
        .collect();
    Ok((nodes, weights))
}

/// Legendre polynomials of order `p` composed with the affine map
/// `[t0, t1] -> [-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegendreBasis {
    order: usize,
    t0: f64,
    t1: f64,
}

impl LegendreBasis {
    pub fn new(order: usize, t0: f64, t1: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("basis order must be at least 1".into()));
        }
        if !(t0.is_finite() && t1.is_finite()) || t1 <= t0 {
            return Err(Error::Domain(format!("invalid time window [{t0}, {t1}]")));
        }
        Ok(Self { order, t0, t1 })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    fn to_reference(&self, t: f64) -> Result<f64> {
        let span = self.t1 - self.t0;
        let slack = DOMAIN_SLACK * span.max(1.0);
        if !t.is_finite() || t < self.t0 - slack || t > self.t1 + slack {
            return Err(Error::Domain(format!(
                "time {t} outside [{}, {}]",
                self.t0, self.t1
            )));
        }
        Ok(((2.0 * t - self.t0 - self.t1) / span).clamp(-1.0, 1.0))
    }

    /// `psi_0(t) ..= psi_p(t)`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        Ok(legendre_unchecked(self.order, self.to_reference(t)?))
    }

    /// Evaluates the truncated series with the given coefficients at `t`.
    pub fn interpolate(&self, coeffs: &[f64], t: f64) -> Result<f64> {
        if coeffs.len() != self.order + 1 {
            return Err(Error::Contract(format!(
                "expected {} coefficients, got {}",
                self.order + 1,
                coeffs.len()
            )));
        }
        let psi = self.eval(t)?;
        Ok(psi.iter().zip(coeffs).map(|(a, b)| a * b).sum())
    }
}

/// Nodes, weights and collocation matrices for one window.
///
/// Immutable once built; share it freely between threads.
#[derive(Clone, Debug)]
pub struct CollocationGrid {
    basis: LegendreBasis,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    m: DMatrix<f64>,
    d: DMatrix<f64>,
    m_inv: DMatrix<f64>,
    d_hat: DMatrix<f64>,
}

impl CollocationGrid {
    pub fn new(basis: LegendreBasis) -> Result<Self> {
        let p = basis.order;
        let (t0, t1) = basis.domain();
        let half = 0.5 * (t1 - t0);
        let (ref_nodes, ref_weights) = gauss_lobatto(p)?;

        let mut nodes: Vec<f64> = ref_nodes.iter().map(|&s| t0 + half * (s + 1.0)).collect();
        nodes[0] = t0;
        nodes[p] = t1;
        let weights = ref_weights.iter().map(|w| w * half).collect();

        let n = p + 1;
        let mut m = DMatrix::zeros(n, n);
        let mut d = DMatrix::zeros(n, n);
        for (q, &s) in ref_nodes.iter().enumerate() {
            let values = legendre_unchecked(p, s);
            let derivs = legendre_deriv_unchecked(p, s);
            for i in 0..n {
                m[(q, i)] = values[i];
                d[(q, i)] = derivs[i] / half;
            }
        }
        let m_inv = m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("collocation matrix M is singular".into()))?;
        let d_hat = &d * &m_inv;
        Ok(Self {
            basis,
            nodes,
            weights,
            m,
            d,
            m_inv,
            d_hat,
        })
    }

    /// Shorthand for `CollocationGrid::new(LegendreBasis::new(order, t0, t1)?)`.
    pub fn on_window(order: usize, t0: f64, t1: f64) -> Result<Self> {
        Self::new(LegendreBasis::new(order, t0, t1)?)
    }

    pub fn basis(&self) -> &LegendreBasis {
        &self.basis
    }

    pub fn order(&self) -> usize {
        self.basis.order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn m_inv(&self) -> &DMatrix<f64> {
        &self.m_inv
    }

    pub fn d_hat(&self) -> &DMatrix<f64> {
        &self.d_hat
    }

    /// Series coefficients `M^-1 values` for one scalar trajectory.
    pub fn values_to_coeffs(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values)?;
        Ok(mat_vec(&self.m_inv, values))
    }

    /// Node values `M coeffs` for one scalar trajectory.
    pub fn coeffs_to_values(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(coeffs)?;
        Ok(mat_vec(&self.m, coeffs))
    }

    /// Node derivatives `Dhat values` for one scalar trajectory.
    pub fn differentiate(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values)?;
        Ok(mat_vec(&self.d_hat, values))
    }

    /// Row of weights `psi(t)^T M^-1`, so that `row . values` evaluates the
    /// interpolant through the node values at `t`.
    pub fn interpolation_row(&self, t: f64) -> Result<Vec<f64>> {
        let psi = self.basis.eval(t)?;
        let n = self.len();
        let mut row = vec![0.0; n];
        for (q, r) in row.iter_mut().enumerate() {
            *r = (0..n).map(|i| psi[i] * self.m_inv[(i, q)]).sum();
        }
        Ok(row)
    }

    /// Stacked [`interpolation_row`](Self::interpolation_row)s, `times.len() x (p + 1)`.
    pub fn interpolation_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut out = DMatrix::zeros(times.len(), n);
        for (k, &t) in times.iter().enumerate() {
            let row = self.interpolation_row(t)?;
            for q in 0..n {
                out[(k, q)] = row[q];
            }
        }
        Ok(out)
    }

    /// Quadrature of samples taken at the nodes.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        self.check_len(values)?;
        Ok(values.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Contract(format!(
                "expected {} node values, got {}",
                self.len(),
                values.len()
            )));
        }
        Ok(())
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * v[c]).sum())
        .collect()
}

/// Finite cosine series `u(t) = sum_i a_i cos(2 pi i t / period + phi_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierInputBasis {
    pub period: f64,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

impl FourierInputBasis {
    pub fn new(period: f64, amplitudes: Vec<f64>, phases: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty() || amplitudes.len() != phases.len() {
            return Err(Error::Contract(
                "Fourier basis needs matching, non-empty amplitude and phase lists".into(),
            ));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Domain(format!("Fourier period must be positive, got {period}")));
        }
        Ok(Self {
            period,
            amplitudes,
            phases,
        })
    }

    /// Identically zero signal.
    pub fn zero() -> Self {
        Self {
            period: 1.0,
            amplitudes: vec![0.0],
            phases: vec![0.0],
        }
    }

    /// Amplitudes `A, A/2, ..., A/(z + 1)` with phases drawn uniformly from `[0, 2 pi)`.
    pub fn decaying<R: Rng + ?Sized>(harmonics: usize, amplitude: f64, period: f64, rng: &mut R) -> Result<Self> {
        let amplitudes = (0..=harmonics).map(|i| amplitude / (i + 1) as f64).collect();
        let phases = (0..=harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Self::new(period, amplitudes, phases)
    }

    pub fn harmonics(&self) -> usize {
        self.amplitudes.len() - 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let omega = 2.0 * PI * t / self.period;
        self.amplitudes
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(i, (a, phi))| a * (omega * i as f64 + phi).cos())
            .sum()
    }

    /// Upper bound on `|u(t)|`.
    pub fn bound(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.abs()).sum()
    }
}

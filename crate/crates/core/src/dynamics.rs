//! The nonlinear process `T(t,τ)` by fixed-step RK4 and the projections onto the
//! invariant and stable manifolds.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linear::{integrate_fundamental_span, matvec, FundamentalBlocks};
use crate::problem::{GridConfig, ProblemSpec};
use crate::solver::ManifoldSolver;

const OVERFLOW: f64 = 1e12;
const DUHAMEL_SAMPLES: usize = 5;
const DUHAMEL_TOL: f64 = 1e-5;

/// States `T(t_i,τ)η` on a uniform grid, ordered by time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSample {
    pub tau: f64,
    pub h: f64,
    pub eta: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Step-doubling estimate `|u_h − u_{2h}|/15` per node.
    pub error_estimate: Vec<f64>,
    /// Largest Duhamel residual over the sampled times, relative to the state scale.
    pub duhamel_residual: f64,
}

impl FlowSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("a flow holds its initial state")
    }

    /// Index of the node nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let i = ((t - self.tau) / self.h).round().max(0.0) as usize;
        i.min(self.len() - 1)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.eta.len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("u_{i}")));
        header.push("error_estimate".into());
        writeln!(w, "{}", header.join(","))?;
        for ((t, u), e) in self.times.iter().zip(&self.states).zip(&self.error_estimate) {
            let mut row = vec![format!("{t:?}")];
            row.extend(u.iter().map(|v| format!("{v:?}")));
            row.push(format!("{e:?}"));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn rk4_step(spec: &ProblemSpec, t: f64, u: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
    let n = u.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut y = vec![0.0; n];
    spec.rhs(t, u, &mut k1)?;
    for i in 0..n {
        y[i] = u[i] + 0.5 * dt * k1[i];
    }
    spec.rhs(t + 0.5 * dt, &y, &mut k2)?;
    for i in 0..n {
        y[i] = u[i] + 0.5 * dt * k2[i];
    }
    spec.rhs(t + 0.5 * dt, &y, &mut k3)?;
    for i in 0..n {
        y[i] = u[i] + dt * k3[i];
    }
    spec.rhs(t + dt, &y, &mut k4)?;
    for i in 0..n {
        out[i] = u[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

/// RK4 from `(t0, u0)` to `t1` in either direction; the last step is shortened if needed.
pub fn rk4_path(spec: &ProblemSpec, t0: f64, u0: &[f64], t1: f64, h: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let span = t1 - t0;
    let dir = if span < 0.0 { -1.0 } else { 1.0 };
    let steps_f = span.abs() / h;
    let mut steps = steps_f.round() as usize;
    let exact = (steps_f - steps as f64).abs() <= 1e-9 * steps_f.max(1.0);
    if !exact {
        steps = steps_f.ceil() as usize;
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(u0.to_vec());
    let mut u = u0.to_vec();
    let mut next = vec![0.0; u.len()];
    for s in 0..steps {
        let t = t0 + dir * s as f64 * h;
        let t_next = if s + 1 == steps { t1 } else { t0 + dir * (s + 1) as f64 * h };
        rk4_step(spec, t, &u, t_next - t, &mut next)?;
        let norm = spec.ambient.norm(&next);
        if !(norm <= OVERFLOW) {
            return Err(Error::Overflow { t: t_next, norm });
        }
        std::mem::swap(&mut u, &mut next);
        times.push(t_next);
        states.push(u.clone());
    }
    Ok((times, states))
}

/// `T(t,τ)η` for `t ∈ [τ, t_end]` with an error estimate and the Duhamel cross-check.
pub fn integrate_process(
    spec: &ProblemSpec,
    tau: f64,
    eta: &[f64],
    t_end: f64,
    grid: &GridConfig,
) -> Result<FlowSample> {
    if !(t_end >= tau) {
        return Err(Error::InvalidSpec(format!("flow end {t_end} precedes start {tau}")));
    }
    let h = grid.h;
    let (times, states) = rk4_path(spec, tau, eta, t_end, h)?;
    let (_, coarse) = rk4_path(spec, tau, eta, t_end, 2.0 * h)?;
    let len = times.len();
    let mut error_estimate = vec![0.0; len];
    for (j, c) in coarse.iter().enumerate() {
        let i = (2 * j).min(len - 1);
        let d: Vec<f64> = states[i].iter().zip(c).map(|(a, b)| a - b).collect();
        error_estimate[i] = spec.ambient.norm(&d) / 15.0;
    }
    for i in (1..len).step_by(2) {
        let right = if i + 1 < len { error_estimate[i + 1] } else { error_estimate[i - 1] };
        error_estimate[i] = error_estimate[i].max(error_estimate[i - 1].max(right));
    }
    let mut flow = FlowSample {
        tau,
        h,
        eta: eta.to_vec(),
        times,
        states,
        error_estimate,
        duhamel_residual: 0.0,
    };
    flow.duhamel_residual = duhamel_residual(spec, &flow)?;
    Ok(flow)
}

/// Relative residual of `u(t) = L(t,τ)η + ∫_τ^t L(t,s)f(s,u(s))ds` at sampled times,
/// with composite Simpson quadrature on the flow grid.
fn duhamel_residual(spec: &ProblemSpec, flow: &FlowSample) -> Result<f64> {
    let h = flow.h;
    // Only whole steps of the uniform grid enter the quadrature.
    let full = flow
        .times
        .iter()
        .take_while(|t| ((*t - flow.tau) / h - ((*t - flow.tau) / h).round()).abs() < 1e-6)
        .count();
    let pairs = (full - 1) / 2;
    if pairs == 0 {
        return Ok(0.0);
    }
    let fb = integrate_fundamental_span(spec, flow.tau, 0.0, 2.0 * pairs as f64 * h, h)?;
    let n = spec.n;
    let k = spec.k;
    let it = fb.tau_index();
    let forces: Vec<Vec<f64>> = (0..=2 * pairs)
        .map(|j| {
            let mut f = vec![0.0; n];
            spec.eval_f(flow.times[j], &flow.states[j], &mut f).map(|_| f)
        })
        .collect::<Result<_>>()?;
    let scale = flow.states[..=2 * pairs]
        .iter()
        .map(|u| spec.ambient.norm(u))
        .fold(1.0, f64::max);
    let stride = (pairs / DUHAMEL_SAMPLES).max(1);
    let mut d = flow.eta.clone();
    let mut worst: f64 = 0.0;
    for p in 1..=pairs {
        let j = 2 * p;
        let i0 = it + j - 2;
        let step1 = |x: &[f64], i: usize| forward_step(&fb, k, i, x);
        let mut acc = step1(&step1(&d, i0), i0 + 1);
        let f0 = step1(&step1(&forces[j - 2], i0), i0 + 1);
        let f1 = step1(&forces[j - 1], i0 + 1);
        for r in 0..n {
            acc[r] += h / 3.0 * (f0[r] + 4.0 * f1[r] + forces[j][r]);
        }
        d = acc;
        if p % stride == 0 || p == pairs {
            let diff: Vec<f64> = d.iter().zip(&flow.states[j]).map(|(a, b)| a - b).collect();
            worst = worst.max(spec.ambient.norm(&diff) / scale);
        }
    }
    if worst > DUHAMEL_TOL {
        return Err(Error::DuhamelMismatch {
            t: flow.times[2 * pairs],
            residual: worst,
            limit: DUHAMEL_TOL,
        });
    }
    Ok(worst)
}

/// `L(t_{i+1}, t_i)x` for the full block-diagonal process.
fn forward_step(fb: &FundamentalBlocks, k: usize, i: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    matvec(fb.n_step_up(i), &x[..k], &mut out[..k]);
    matvec(fb.s_step_up(i), &x[k..], &mut out[k..]);
    out
}

/// `P_Σ(t)x = Qx + Σ(t, Qx)`.
pub fn project_p_sigma(solver: &ManifoldSolver, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let k = solver.spec.k;
    let (_, sol) = solver.sigma_at(t, &x[..k])?;
    let mut out = x[..k].to_vec();
    out.extend_from_slice(&sol.sigma);
    Ok(out)
}

/// `P_Θ(t)x = Θ(t, (I−Q)x) + (I−Q)x`.
pub fn project_p_theta(solver: &ManifoldSolver, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let k = solver.spec.k;
    let anchor = solver.anchor(t)?;
    let mut eta = vec![0.0; x.len()];
    eta[k..].copy_from_slice(&x[k..]);
    let sol = solver.solve_stable(&anchor, &eta)?;
    let mut out = sol.theta;
    out.extend_from_slice(&x[k..]);
    Ok(out)
}

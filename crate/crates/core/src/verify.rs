//! Numerical checks of the manifold theorems on computed solutions, and the benchmark
//! battery built from them.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{integrate_process, rk4_path};
use crate::error::{Error, Result};
use crate::linear::Anchor;
use crate::problem::{GridConfig, ProblemSpec};
use crate::solver::{ManifoldSolver, UnstableSolution};
use crate::systems;

pub const TOL_REL: f64 = 1e-2;
pub const TOL_ABS: f64 = 1e-6;

/// Nodes skipped between samples along trajectory segments.
const SEGMENT_STRIDE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub system: String,
    pub parameters: BTreeMap<String, f64>,
    /// Left side at the worst sample.
    pub measured: f64,
    /// Right side at the worst sample.
    pub bound: f64,
    /// `bound·(1+tol_rel) + tol_abs − measured` at the worst sample.
    pub slack: f64,
    pub pass: bool,
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub samples: usize,
    pub violations: usize,
    pub details: BTreeMap<String, f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub runtime: Duration,
}

impl CheckReport {
    fn failed(check: &str, system: &str, parameters: BTreeMap<String, f64>, err: &Error) -> CheckReport {
        CheckReport {
            check: check.into(),
            system: system.into(),
            parameters,
            measured: f64::NAN,
            bound: f64::NAN,
            slack: f64::NAN,
            pass: false,
            tol_rel: 0.0,
            tol_abs: 0.0,
            samples: 0,
            violations: 1,
            details: BTreeMap::new(),
            error: Some(err.to_string()),
            runtime: Duration::ZERO,
        }
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        let params: Vec<String> = self.parameters.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "{} {} {} [{}] measured={:.3e} bound={:.3e} samples={} violations={}{}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check,
            self.system,
            params.join(","),
            self.measured,
            self.bound,
            self.samples,
            self.violations,
            self.error.as_ref().map(|e| format!(" error: {e}")).unwrap_or_default()
        )
    }
}

/// Accumulates `lhs ≤ rhs·(1+tol_rel) + tol_abs + allowance` over samples.
struct Tally {
    tol_rel: f64,
    tol_abs: f64,
    /// `(normalised excess, excess, lhs, rhs)` of the worst sample.
    worst: Option<(f64, f64, f64, f64)>,
    samples: usize,
    violations: usize,
    max_allowance: f64,
}

impl Tally {
    fn new(tol_rel: f64, tol_abs: f64) -> Tally {
        Tally {
            tol_rel,
            tol_abs,
            worst: None,
            samples: 0,
            violations: 0,
            max_allowance: 0.0,
        }
    }

    fn add(&mut self, lhs: f64, rhs: f64, allowance: f64) {
        let limit = rhs * (1.0 + self.tol_rel) + self.tol_abs + allowance;
        let excess = lhs - limit;
        let normalised = if limit > 0.0 {
            excess / limit
        } else if excess == 0.0 {
            0.0
        } else {
            excess.signum() * f64::INFINITY
        };
        self.samples += 1;
        self.max_allowance = self.max_allowance.max(allowance);
        if !(excess <= 0.0) {
            self.violations += 1;
        }
        if self.worst.is_none_or(|(w, ..)| normalised > w || normalised.is_nan()) {
            self.worst = Some((normalised, excess, lhs, rhs));
        }
    }

    fn report(self, check: &str, system: &str, parameters: BTreeMap<String, f64>) -> CheckReport {
        let (_, excess, measured, bound) = self.worst.unwrap_or((0.0, 0.0, 0.0, 0.0));
        let mut details = BTreeMap::new();
        if self.max_allowance > 0.0 {
            details.insert("error_allowance".into(), self.max_allowance);
        }
        CheckReport {
            check: check.into(),
            system: system.into(),
            parameters,
            measured,
            bound,
            slack: -excess,
            pass: self.violations == 0,
            tol_rel: self.tol_rel,
            tol_abs: self.tol_abs,
            samples: self.samples,
            violations: self.violations,
            details,
            error: None,
            runtime: Duration::ZERO,
        }
    }
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn q_eta(solver: &ManifoldSolver, q: &[f64]) -> Vec<f64> {
    let mut eta = vec![0.0; solver.spec.n];
    eta[..q.len()].copy_from_slice(q);
    eta
}

fn timed(mut r: CheckReport, start: Instant) -> CheckReport {
    r.runtime = start.elapsed();
    r
}

/// Flows chart points forward and measures their distance to the graph at later times.
pub fn check_invariance(solver: &ManifoldSolver, tau: f64, horizon: f64, base_points: &[Vec<f64>]) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let k = spec.k;
    let anchor = solver.anchor(tau)?;
    let times: Vec<f64> = (1..=horizon.floor() as usize).map(|i| tau + i as f64).collect();
    let anchors: Vec<Anchor> = times.par_iter().map(|t| solver.anchor(*t)).collect::<Result<_>>()?;
    let rows: Vec<Vec<(f64, f64)>> = base_points
        .par_iter()
        .map(|q| {
            let sol = solver.solve_unstable(&anchor, &q_eta(solver, q))?;
            let e0 = sol.diagnostics.error_bound();
            let mut x = q.clone();
            x.extend_from_slice(&sol.sigma);
            let flow = integrate_process(spec, tau, &x, tau + horizon, &solver.grid)?;
            times
                .iter()
                .zip(&anchors)
                .map(|(t, a)| {
                    let j = flow.index_of(*t);
                    let u = &flow.states[j];
                    let s = solver.solve_unstable(a, &q_eta(solver, &u[..k]))?;
                    let d: Vec<f64> = u[k..].iter().zip(&s.sigma).map(|(p, s)| p - s).collect();
                    let allowance = 10.0 * (e0 + s.diagnostics.error_bound() + flow.error_estimate[j]);
                    Ok((spec.ambient.norm(&d), allowance))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut tally = Tally::new(0.0, 1e-8);
    for (d, bound) in rows.into_iter().flatten() {
        tally.add(d, bound, 0.0);
    }
    let r = tally.report("invariance", &spec.name, params(&[("tau", tau), ("horizon", horizon)]));
    Ok(timed(r, start))
}

/// `|T(t,τ)η − P_Σ(t)T(t,τ)η|_{S(t)} ≤ |η − P_Σ(τ)η|_{S(τ)} e^{−ω(t−τ)}`.
pub fn check_attraction(solver: &ManifoldSolver, tau: f64, eta: &[f64], horizon: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let k = spec.k;
    let omega = solver.gap.omega;
    let anchor = solver.anchor(tau)?;
    let it = anchor.fb.tau_index();
    let sol = solver.solve_unstable(&anchor, &q_eta(solver, &eta[..k]))?;
    let e0 = sol.diagnostics.error_bound();
    let d0: Vec<f64> = eta[k..].iter().zip(&sol.sigma).map(|(p, s)| p - s).collect();
    let lhs0 = anchor.s_norm_at(it, &d0);
    let flow = integrate_process(spec, tau, eta, tau + horizon, &solver.grid)?;
    let steps = (horizon / 0.25).round() as usize;
    let samples: Vec<(f64, f64, f64)> = (1..=steps)
        .into_par_iter()
        .map(|i| {
            let t = tau + 0.25 * i as f64;
            let j = flow.index_of(t);
            let u = &flow.states[j];
            let a = solver.anchor(t)?;
            let s = solver.solve_unstable(&a, &q_eta(solver, &u[..k]))?;
            let d: Vec<f64> = u[k..].iter().zip(&s.sigma).map(|(p, s)| p - s).collect();
            let lhs = a.s_norm_at(a.fb.tau_index(), &d);
            let allowance = s.diagnostics.error_bound() + e0 + flow.error_estimate[j];
            Ok((t, lhs, allowance))
        })
        .collect::<Result<_>>()?;
    let mut tally = Tally::new(TOL_REL, TOL_ABS);
    let mut fit = Vec::new();
    for &(t, lhs, allowance) in &samples {
        tally.add(lhs, lhs0 * (-omega * (t - tau)).exp(), allowance);
        if lhs > 1e3 * allowance.max(1e-300) {
            fit.push((t - tau, lhs.ln()));
        }
    }
    let mut r = tally.report("attraction", &spec.name, params(&[("tau", tau), ("horizon", horizon)]));
    r.details.insert("omega".into(), omega);
    r.details.insert("initial_defect".into(), lhs0);
    if let Some(rate) = fitted_decay(&fit) {
        r.details.insert("fitted_rate".into(), rate);
    }
    Ok(timed(r, start))
}

/// Least-squares decay exponent `−slope` of `ln y` against `t`.
fn fitted_decay(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let m = points.len() as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

/// Sign classes of `ζ` outside a tolerance band.
fn sign_changes(zetas: &[(f64, f64)]) -> (usize, usize) {
    let mut last = 0i8;
    let (mut down, mut up) = (0, 0);
    for &(z, band) in zetas {
        let s = if z > band {
            1
        } else if z < -band {
            -1
        } else {
            0
        };
        if s != 0 {
            if last == 1 && s == -1 {
                down += 1;
            } else if last == -1 && s == 1 {
                up += 1;
            }
            last = s;
        }
    }
    (down, up)
}

/// Lipschitz bound with `κ_Σ` over all chart pairs, the backward cone condition along
/// fixed-point segments, and the forward sign pattern of `ζ` along flow pairs.
pub fn check_lipschitz_and_cone(
    solver: &ManifoldSolver,
    tau: f64,
    base_points: &[Vec<f64>],
    forward_pairs: &[(Vec<f64>, Vec<f64>)],
    horizon: f64,
) -> Result<Vec<CheckReport>> {
    let start = Instant::now();
    let spec = &solver.spec;
    let k = spec.k;
    let gap = &solver.gap;
    let kappa = gap.cone_kappa();
    let anchor = solver.anchor(tau)?;
    let it = anchor.fb.tau_index();
    let sols: Vec<UnstableSolution> = base_points
        .par_iter()
        .map(|q| solver.solve_unstable(&anchor, &q_eta(solver, q)))
        .collect::<Result<_>>()?;

    let mut lip = Tally::new(TOL_REL, TOL_ABS);
    let mut cone = Tally::new(TOL_REL, TOL_ABS);
    let mut skipped = 0usize;
    for i in 0..sols.len() {
        for j in i + 1..sols.len() {
            let (a, b) = (&sols[i], &sols[j]);
            let dq: Vec<f64> = base_points[i].iter().zip(&base_points[j]).map(|(x, y)| x - y).collect();
            let nq = anchor.n_norm_at(it, &dq);
            if nq == 0.0 {
                skipped += 1;
                continue;
            }
            let ds: Vec<f64> = a.sigma.iter().zip(&b.sigma).map(|(x, y)| x - y).collect();
            let err = a.diagnostics.error_bound() + b.diagnostics.error_bound();
            lip.add(anchor.s_norm_at(it, &ds) / nq, gap.kappa_sigma, err / nq);

            let seg_a = &a.segment;
            let seg_b = &b.segment;
            for m in (0..seg_a.len()).step_by(SEGMENT_STRIDE) {
                let t = seg_a.time(m);
                let d: Vec<f64> = seg_a.value(m).iter().zip(seg_b.value(m)).map(|(x, y)| x - y).collect();
                let node = seg_a.first_node + m;
                let u = anchor.n_norm_at(node, &d[..k]);
                let v = anchor.s_norm_at(node, &d[k..]);
                let zeta = v - kappa * u;
                let allowance = err * (-gap.sigma_star * (t - tau)).exp() * (1.0 + kappa) + TOL_REL * (v + kappa * u);
                cone.add(zeta, 0.0, allowance);
            }
        }
    }
    let mut lip_r = lip.report("lipschitz", &spec.name, params(&[("tau", tau)]));
    lip_r.details.insert("kappa_sigma".into(), gap.kappa_sigma);
    lip_r.details.insert("skipped_pairs".into(), skipped as f64);
    let mut cone_r = cone.report("cone_backward", &spec.name, params(&[("tau", tau)]));
    cone_r.details.insert("kappa".into(), kappa);

    let window = anchor.window_nodes();
    let horizon_nodes = ((horizon / solver.grid.h).round() as usize).min(window);
    let t_end = anchor.fb.time(it + horizon_nodes);
    let patterns: Vec<(usize, usize, usize)> = forward_pairs
        .par_iter()
        .map(|(x, y)| {
            let fx = integrate_process(spec, tau, x, t_end, &solver.grid)?;
            let fy = integrate_process(spec, tau, y, t_end, &solver.grid)?;
            let zetas: Vec<(f64, f64)> = (0..fx.len().min(horizon_nodes + 1))
                .step_by(SEGMENT_STRIDE)
                .map(|m| {
                    let d: Vec<f64> = fx.states[m].iter().zip(&fy.states[m]).map(|(a, b)| a - b).collect();
                    let u = anchor.n_norm_at(it + m, &d[..k]);
                    let v = anchor.s_norm_at(it + m, &d[k..]);
                    (v - kappa * u, TOL_ABS + TOL_REL * (v + kappa * u))
                })
                .collect();
            let (down, up) = sign_changes(&zetas);
            Ok((down, up, zetas.len()))
        })
        .collect::<Result<_>>()?;
    // + → − counts once and − → + twice, so at most one admissible change keeps this ≤ 1.
    let mut fwd = Tally::new(0.0, 0.0);
    let mut worst_down = 0;
    for (down, up, _) in &patterns {
        fwd.add((down + 2 * up) as f64, 1.0, 0.0);
        worst_down = worst_down.max(*down);
    }
    let mut fwd_r = fwd.report("cone_forward", &spec.name, params(&[("tau", tau), ("horizon", horizon)]));
    fwd_r.details.insert("kappa".into(), kappa);
    fwd_r.details.insert("sampled_points".into(), patterns.iter().map(|p| p.2).sum::<usize>() as f64);
    fwd_r.details.insert("max_down_crossings".into(), worst_down as f64);
    let elapsed = start.elapsed();
    Ok(vec![lip_r, cone_r, fwd_r]
        .into_iter()
        .map(|mut r| {
            r.runtime = elapsed;
            r
        })
        .collect())
}

/// `‖z(t)‖_t ≤ (Γ(1,κ_Σ)/Γ(1,0)) e^{−(ρ+L₁Γ(1,κ_Σ))(t−τ)} ‖Qη‖_τ` along the backward segments.
pub fn check_backward_growth(solver: &ManifoldSolver, tau: f64, base_points: &[Vec<f64>]) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let gap = &solver.gap;
    let anchor = solver.anchor(tau)?;
    let it = anchor.fb.tau_index();
    let rate = gap.backward_rate();
    let factor = gap.backward_factor();
    let rows: Vec<Vec<(f64, f64, f64)>> = base_points
        .par_iter()
        .map(|q| {
            let eta = q_eta(solver, q);
            let sol = solver.solve_unstable(&anchor, &eta)?;
            let norm0 = anchor.moving_norm_at(it, &eta);
            let err = sol.diagnostics.error_bound();
            let seg = &sol.segment;
            Ok((0..seg.len())
                .step_by(SEGMENT_STRIDE)
                .map(|m| {
                    let t = seg.time(m);
                    let lhs = anchor.moving_norm_at(seg.first_node + m, seg.value(m));
                    let rhs = factor * (-rate * (t - tau)).exp() * norm0;
                    (lhs, rhs, err * (-gap.sigma_star * (t - tau)).exp())
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut tally = Tally::new(TOL_REL, TOL_ABS);
    for (lhs, rhs, a) in rows.into_iter().flatten() {
        tally.add(lhs, rhs, a);
    }
    let mut r = tally.report("backward_growth", &spec.name, params(&[("tau", tau)]));
    r.details.insert("rate".into(), rate);
    r.details.insert("factor".into(), factor);
    Ok(timed(r, start))
}

/// `‖T(t,τ)P_Θη‖_t ≤ (Γ(κ_Θ,1)/Γ(0,1)) e^{−(γ−L₂Γ(κ_Θ,1))(t−τ)} ‖P_Θη‖_τ`.
pub fn check_stable_decay(solver: &ManifoldSolver, tau: f64, eta: &[f64], horizon: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let k = spec.k;
    let gap = &solver.gap;
    let anchor = solver.anchor(tau)?;
    let it = anchor.fb.tau_index();
    let mut p_eta = vec![0.0; spec.n];
    p_eta[k..].copy_from_slice(&eta[k..]);
    let sol = solver.solve_stable(&anchor, &p_eta)?;
    let mut x = sol.theta.clone();
    x.extend_from_slice(&eta[k..]);
    let norm0 = anchor.moving_norm_at(it, &x);
    let horizon_nodes = ((horizon / solver.grid.h).round() as usize).min(anchor.window_nodes());
    let t_end = anchor.fb.time(it + horizon_nodes);
    let flow = integrate_process(spec, tau, &x, t_end, &solver.grid)?;
    let rate = gap.stable_rate();
    let factor = gap.stable_factor();
    let mut tally = Tally::new(TOL_REL, TOL_ABS);
    for m in (0..flow.len().min(horizon_nodes + 1)).step_by(SEGMENT_STRIDE) {
        let t = flow.times[m];
        let lhs = anchor.moving_norm_at(it + m, &flow.states[m]);
        let rhs = factor * (-rate * (t - tau)).exp() * norm0;
        tally.add(lhs, rhs, flow.error_estimate[m]);
    }
    let mut r = tally.report("stable_decay", &spec.name, params(&[("tau", tau), ("horizon", horizon)]));
    r.details.insert("rate".into(), rate);
    r.details.insert("factor".into(), factor);
    r.details.insert("theta_error_bound".into(), sol.diagnostics.error_bound());
    Ok(timed(r, start))
}

fn derivative_at(solver: &ManifoldSolver, anchor: &Anchor, eta: &[f64]) -> Result<DMatrix<f64>> {
    let base = solver.solve_unstable(anchor, eta)?;
    let d = solver.solve_derivative(anchor, &base)?;
    let rows = d.dsigma.len();
    let cols = solver.spec.n;
    Ok(DMatrix::from_fn(rows, cols, |i, j| d.dsigma[i][j]))
}

/// Modulus of continuity `d(h) = max_e ‖D_ηΣ(τ,η+h e) − D_ηΣ(τ,η)‖` over the unit
/// directions of the N block; passes when `d` is non-increasing along `hs` and
/// `d(h_min) ≤ 10⁻³`.
pub fn check_c1(solver: &ManifoldSolver, tau: f64, eta: &[f64], hs: &[f64]) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let anchor = solver.anchor(tau)?;
    let d0 = derivative_at(solver, &anchor, eta)?;
    let ds: Vec<f64> = hs
        .par_iter()
        .map(|h| {
            let mut worst: f64 = 0.0;
            for j in 0..spec.k {
                let mut e = eta.to_vec();
                e[j] += h;
                let d = derivative_at(solver, &anchor, &e)?;
                worst = worst.max(spec.ambient.op_norm(&(d - &d0)));
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let mut violations = 0;
    for w in ds.windows(2) {
        if w[1] > w[0] * (1.0 + TOL_REL) + TOL_ABS {
            violations += 1;
        }
    }
    let measured = *ds.last().unwrap_or(&0.0);
    let bound = 1e-3;
    if measured > bound * (1.0 + TOL_REL) + TOL_ABS {
        violations += 1;
    }
    let mut details = BTreeMap::new();
    for (h, d) in hs.iter().zip(&ds) {
        details.insert(format!("d({h})"), *d);
    }
    let r = CheckReport {
        check: "c1".into(),
        system: spec.name.clone(),
        parameters: params(&[("tau", tau)]),
        measured,
        bound,
        slack: bound * (1.0 + TOL_REL) + TOL_ABS - measured,
        pass: violations == 0,
        tol_rel: TOL_REL,
        tol_abs: TOL_ABS,
        samples: ds.len(),
        violations,
        details,
        error: None,
        runtime: Duration::ZERO,
    };
    Ok(timed(r, start))
}

/// `D_ηΣ` against central differences of `Σ` with step `step`, relative per entry.
pub fn check_derivative_fd(solver: &ManifoldSolver, tau: f64, eta: &[f64], step: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let anchor = solver.anchor(tau)?;
    let d = derivative_at(solver, &anchor, eta)?;
    let mut tally = Tally::new(0.0, 0.0);
    for j in 0..spec.n {
        let mut up = eta.to_vec();
        let mut dn = eta.to_vec();
        up[j] += step;
        dn[j] -= step;
        let su = solver.solve_unstable(&anchor, &up)?.sigma;
        let sd = solver.solve_unstable(&anchor, &dn)?.sigma;
        for i in 0..su.len() {
            let fd = (su[i] - sd[i]) / (2.0 * step);
            let scale = fd.abs().max(d[(i, j)].abs()).max(1e-8);
            tally.add((d[(i, j)] - fd).abs() / scale, 1e-4, 0.0);
        }
    }
    let r = tally.report("derivative_fd", &spec.name, params(&[("tau", tau), ("step", step)]));
    Ok(timed(r, start))
}

/// `Σ(τ,q)` against a known value, with contraction and error-bound diagnostics.
pub fn check_sigma_oracle(
    solver: &ManifoldSolver,
    tau: f64,
    q: &[f64],
    exact: &[f64],
    tol: f64,
) -> Result<Vec<CheckReport>> {
    let start = Instant::now();
    let spec = &solver.spec;
    let gap = &solver.gap;
    let anchor = solver.anchor(tau)?;
    let it = anchor.fb.tau_index();
    let sol = solver.solve_unstable(&anchor, &q_eta(solver, q))?;
    let diag = &sol.diagnostics;
    let diff = |s: &[f64]| -> f64 {
        let d: Vec<f64> = s.iter().zip(exact).map(|(a, b)| a - b).collect();
        anchor.s_norm_at(it, &d)
    };
    let final_err = diff(&sol.sigma);
    let mut p = params(&[("tau", tau)]);
    for (i, v) in q.iter().enumerate() {
        p.insert(format!("q_{}", i + 1), *v);
    }

    let mut value = Tally::new(0.0, 0.0);
    value.add(final_err, tol, 0.0);
    let mut value_r = value.report("sigma_oracle", &spec.name, p.clone());
    value_r.details.insert("iterations".into(), diag.iterations as f64);
    value_r.details.insert("error_bound".into(), diag.error_bound());

    let mut ratio = Tally::new(0.0, 0.0);
    ratio.add(diag.max_ratio(), gap.theta_star + 0.05, 0.0);
    let mut ratio_r = ratio.report("contraction_ratio", &spec.name, p.clone());
    ratio_r.details.insert("theta_star".into(), gap.theta_star);
    ratio_r.details.insert("observed_ratios".into(), diag.ratios.len() as f64);

    // Every iterate's distance to the oracle is within its a-posteriori bound on top of
    // the discretization floor of the converged discrete fixed point.
    let q_factor = gap.theta_star / (1.0 - gap.theta_star);
    let mut apost = Tally::new(TOL_REL, 0.0);
    for (hist, incr) in diag.boundary_history.iter().zip(&diag.increments) {
        apost.add(diff(hist), q_factor * incr + final_err, 0.0);
    }
    let mut apost_r = apost.report("apost_domination", &spec.name, p.clone());
    apost_r.details.insert("discretization_floor".into(), final_err);

    let mut total = Tally::new(0.0, 0.0);
    total.add(final_err, diag.error_bound(), 0.0);
    let total_r = total.report("error_bound", &spec.name, p);

    let elapsed = start.elapsed();
    Ok(vec![value_r, ratio_r, apost_r, total_r]
        .into_iter()
        .map(|mut r| {
            r.runtime = elapsed;
            r
        })
        .collect())
}

/// Independent value of `Σ(τ,q)` for one-dimensional blocks: the `p` minimising the
/// weighted backward size `max_t e^{ρ(t−τ)}‖u(t)‖` of the trajectory through `(q,p)`
/// over `[τ−window, τ]`.
pub fn shooting_sigma(spec: &ProblemSpec, rho: f64, tau: f64, q: f64, window: f64, h: f64) -> Result<f64> {
    let sigma = rho;
    let objective = |p: f64| -> Result<f64> {
        let (times, states) = rk4_path(spec, tau, &[q, p], tau - window, h)?;
        Ok(times
            .iter()
            .zip(&states)
            .map(|(t, u)| (sigma * (t - tau)).exp() * spec.ambient.norm(u))
            .fold(0.0, f64::max))
    };
    let r = 2.0 * q.abs() + 1.0;
    let (mut a, mut b) = (-r, r);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (objective(c)?, objective(d)?);
    while b - a > 1e-10 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Compares the solver against [`shooting_sigma`] within `10⁻³`.
pub fn check_shooting(solver: &ManifoldSolver, tau: f64, q: f64, window: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = &solver.spec;
    let (_, sol) = solver.sigma_at(tau, &[q])?;
    let p_star = shooting_sigma(spec, solver.exponents.rho, tau, q, window, solver.grid.h)?;
    let mut tally = Tally::new(0.0, 0.0);
    tally.add((sol.sigma[0] - p_star).abs(), 1e-3, 0.0);
    let mut r = tally.report("shooting_oracle", &spec.name, params(&[("tau", tau), ("q", q), ("window", window)]));
    r.details.insert("sigma".into(), sol.sigma[0]);
    r.details.insert("shooting".into(), p_star);
    Ok(timed(r, start))
}

/// Passes when setting up the solver is refused with `GapFails`.
pub fn check_gap_fails(spec: ProblemSpec, grid: &GridConfig) -> CheckReport {
    let start = Instant::now();
    let name = spec.name.clone();
    let outcome = ManifoldSolver::new(spec, *grid);
    let (measured, theta, error) = match outcome {
        Err(Error::GapFails { theta }) => (0.0, theta, None),
        Err(e) => (1.0, f64::NAN, Some(e.to_string())),
        Ok(s) => (1.0, s.gap.theta_star, None),
    };
    let mut details = BTreeMap::new();
    details.insert("theta_min".into(), theta);
    let r = CheckReport {
        check: "gap_fails".into(),
        system: name,
        parameters: BTreeMap::new(),
        measured,
        bound: 0.0,
        slack: -measured,
        pass: measured == 0.0,
        tol_rel: 0.0,
        tol_abs: 0.0,
        samples: 1,
        violations: measured as usize,
        details,
        error,
        runtime: Duration::ZERO,
    };
    timed(r, start)
}

fn guarded(check: &str, system: &str, f: impl FnOnce() -> Result<Vec<CheckReport>>) -> Vec<CheckReport> {
    f().unwrap_or_else(|e| vec![CheckReport::failed(check, system, BTreeMap::new(), &e)])
}

fn scalar_points(values: &[f64]) -> Vec<Vec<f64>> {
    values.iter().map(|v| vec![*v]).collect()
}

fn unit(n: usize, j: usize, s: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[j] = s;
    e
}

fn forward_pairs(n: usize, k: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut a = unit(n, 0, 0.1);
    a[k] = 1.0;
    let mut b = unit(n, 0, 1.0);
    b[k] = 0.5;
    let mut c = unit(n, k, 0.2);
    c[0] = -0.5;
    let mut d = unit(n, 0, 0.01);
    d[k] = -2.0;
    vec![(a, vec![0.0; n]), (b, c), (d, unit(n, k, 1.0))]
}

/// Which inputs the battery uses; defaults suit unit-scale problems.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryInputs {
    pub tau: f64,
    pub base_points: Vec<Vec<f64>>,
    pub attraction_eta: Vec<f64>,
    pub stable_eta: Vec<f64>,
    pub derivative_eta: Vec<f64>,
    pub horizon: f64,
}

impl BatteryInputs {
    pub fn defaults(n: usize, k: usize, tau: f64) -> BatteryInputs {
        let mut base_points = vec![vec![0.0; k]];
        for j in 0..k {
            for s in [-1.0, -0.5, 0.5, 1.0] {
                base_points.push(unit(k, j, s));
            }
        }
        let mut attraction_eta = unit(n, 0, 1.0);
        attraction_eta[k] = 1.0;
        let mut stable_eta = unit(n, 0, 3.0);
        stable_eta[k] = 1.0;
        BatteryInputs {
            tau,
            base_points,
            attraction_eta,
            stable_eta,
            derivative_eta: unit(n, 0, 1.0),
            horizon: 5.0,
        }
    }
}

/// Every theorem check on one problem.
pub fn verify_problem(solver: &ManifoldSolver, inputs: &BatteryInputs) -> Vec<CheckReport> {
    let name = solver.spec.name.clone();
    let (n, k) = (solver.spec.n, solver.spec.k);
    let tau = inputs.tau;
    let horizon = inputs.horizon;
    let points = &inputs.base_points;
    let flowed: Vec<Vec<f64>> = points.iter().filter(|q| q.iter().any(|v| *v != 0.0)).take(3).cloned().collect();
    let pairs = forward_pairs(n, k);
    let mut out = Vec::new();
    out.extend(guarded("invariance", &name, || Ok(vec![check_invariance(solver, tau, horizon, &flowed)?])));
    out.extend(guarded("attraction", &name, || {
        Ok(vec![check_attraction(solver, tau, &inputs.attraction_eta, horizon + 3.0)?])
    }));
    out.extend(guarded("lipschitz", &name, || check_lipschitz_and_cone(solver, tau, points, &pairs, horizon)));
    out.extend(guarded("backward_growth", &name, || Ok(vec![check_backward_growth(solver, tau, points)?])));
    out.extend(guarded("stable_decay", &name, || {
        Ok(vec![check_stable_decay(solver, tau, &inputs.stable_eta, horizon)?])
    }));
    out.extend(guarded("c1", &name, || {
        Ok(vec![check_c1(solver, tau, &inputs.derivative_eta, &[0.5, 0.25, 0.1, 0.05, 0.01, 0.005])?])
    }));
    out.extend(guarded("derivative_fd", &name, || {
        Ok(vec![check_derivative_fd(solver, tau, &inputs.derivative_eta, 1e-4)?])
    }));
    out
}

fn battery(solver: &ManifoldSolver, attraction_eta: &[f64], stable_eta: &[f64]) -> Vec<CheckReport> {
    let mut inputs = BatteryInputs::defaults(solver.spec.n, solver.spec.k, 0.0);
    inputs.base_points = scalar_points(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
    inputs.attraction_eta = attraction_eta.to_vec();
    inputs.stable_eta = stable_eta.to_vec();
    verify_problem(solver, &inputs)
}

enum Task {
    Slope(f64),
    RotgapBattery,
    Tanhline,
    PeriodicForced,
    GapFails,
}

fn run_task(task: &Task, grid: &GridConfig) -> Vec<CheckReport> {
    match task {
        Task::Slope(eps) => {
            let spec = systems::rotgap(*eps);
            let name = spec.name.clone();
            let tol = if *eps <= 0.6 { 1e-4 } else { 1e-3 };
            guarded("sigma_oracle", &name, || {
                let solver = ManifoldSolver::new(spec, *grid)?;
                check_sigma_oracle(&solver, 0.0, &[1.0], &[systems::rotgap_slope(*eps)], tol)
            })
        }
        Task::RotgapBattery => {
            let spec = systems::rotgap(0.6);
            let name = spec.name.clone();
            match ManifoldSolver::new(spec, *grid) {
                Ok(s) => battery(&s, &[0.0, 1.0], &[0.0, 1.0]),
                Err(e) => vec![CheckReport::failed("setup", &name, BTreeMap::new(), &e)],
            }
        }
        Task::Tanhline => {
            let spec = systems::tanhline(0.5);
            let name = spec.name.clone();
            match ManifoldSolver::new(spec, *grid) {
                Ok(s) => {
                    let mut out = Vec::new();
                    for q in [0.5, 1.0, 2.0] {
                        out.extend(guarded("sigma_oracle", &name, || {
                            check_sigma_oracle(&s, 0.0, &[q], &[systems::tanhline_sigma(0.5, q)], 1e-4)
                        }));
                    }
                    out.extend(battery(&s, &[1.0, 1.0], &[3.0, 1.0]));
                    out
                }
                Err(e) => vec![CheckReport::failed("setup", &name, BTreeMap::new(), &e)],
            }
        }
        Task::PeriodicForced => {
            let spec = systems::periodic_forced();
            let name = spec.name.clone();
            match ManifoldSolver::new(spec, *grid) {
                Ok(s) => {
                    let mut out = Vec::new();
                    for (tau, q) in [(0.0, 0.5), (0.0, 1.0), (1.0, 1.0), (2.5, -1.5)] {
                        out.extend(guarded("shooting_oracle", &name, || Ok(vec![check_shooting(&s, tau, q, 10.0)?])));
                    }
                    let points = scalar_points(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
                    out.extend(guarded("invariance", &name, || {
                        Ok(vec![check_invariance(&s, 0.0, 3.0, &scalar_points(&[-1.0, 1.0]))?])
                    }));
                    out.extend(guarded("backward_growth", &name, || Ok(vec![check_backward_growth(&s, 0.0, &points)?])));
                    out.extend(guarded("lipschitz", &name, || {
                        check_lipschitz_and_cone(&s, 0.0, &points, &forward_pairs(2, 1), 5.0)
                    }));
                    out
                }
                Err(e) => vec![CheckReport::failed("setup", &name, BTreeMap::new(), &e)],
            }
        }
        Task::GapFails => vec![check_gap_fails(systems::rotgap(1.0), grid)],
    }
}

/// Runs the benchmark battery; report order is fixed regardless of scheduling.
pub fn run_benchmarks(grid: &GridConfig) -> Vec<CheckReport> {
    let tasks = [
        Task::Slope(0.2),
        Task::Slope(0.5),
        Task::Slope(0.6),
        Task::Slope(0.9),
        Task::RotgapBattery,
        Task::Tanhline,
        Task::PeriodicForced,
        Task::GapFails,
    ];
    tasks.par_iter().map(|t| run_task(t, grid)).collect::<Vec<_>>().into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solver(spec: ProblemSpec) -> ManifoldSolver {
        ManifoldSolver::new(spec, GridConfig::default()).unwrap()
    }

    #[test]
    fn tally_reports_the_worst_sample() {
        let mut t = Tally::new(0.0, 0.0);
        t.add(1.0, 2.0, 0.0);
        t.add(3.0, 2.5, 0.0);
        t.add(0.0, 1.0, 0.0);
        let r = t.report("x", "y", BTreeMap::new());
        assert!(!r.pass);
        assert_eq!((r.measured, r.bound, r.violations, r.samples), (3.0, 2.5, 1, 3));
        assert!((r.slack + 0.5).abs() < 1e-15);
        let pass_rule = r.measured <= r.bound * (1.0 + r.tol_rel) + r.tol_abs;
        assert_eq!(pass_rule, r.pass);
    }

    #[test]
    fn sign_pattern_counts() {
        let b = 0.1;
        assert_eq!(sign_changes(&[(1.0, b), (0.05, b), (-1.0, b)]), (1, 0));
        assert_eq!(sign_changes(&[(-1.0, b), (1.0, b)]), (0, 1));
        assert_eq!(sign_changes(&[(0.0, b), (0.01, b)]), (0, 0));
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.5, 2.0 - 0.8 * i as f64 * 0.5)).collect();
        assert!((fitted_decay(&pts).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn linear_problem_checks() {
        let s = solver(systems::linear_only());
        let r = check_invariance(&s, 0.0, 3.0, &scalar_points(&[1.0])).unwrap();
        assert!(r.pass && r.measured <= 1e-8);
        let r = check_stable_decay(&s, 0.0, &[0.0, 1.0], 5.0).unwrap();
        assert!(r.pass);
        let r = check_c1(&s, 0.0, &[1.0, 0.0], &[0.5, 0.1]).unwrap();
        assert!(r.pass && r.measured == 0.0);
    }

    #[test]
    fn rotgap_attraction_decays_at_the_stable_eigenvalue() {
        let s = solver(systems::rotgap(0.6));
        assert!((s.gap.omega - 1.0 / 7.0).abs() < 1e-12);
        let r = check_attraction(&s, 0.0, &[0.0, 1.0], 8.0).unwrap();
        assert!(r.pass, "{}", r.summary());
        assert!((r.details["fitted_rate"] - 0.8).abs() < 0.02, "{:?}", r.details);
    }

    #[test]
    fn attraction_from_the_manifold_is_trivial() {
        let s = solver(systems::tanhline(0.5));
        let q = 0.7;
        let r = check_attraction(&s, 0.0, &[q, systems::tanhline_sigma(0.5, q)], 2.0).unwrap();
        assert!(r.pass);
        assert!(r.details["initial_defect"] <= 1e-5);
    }

    #[test]
    fn lipschitz_ratio_of_rotgap() {
        let s = solver(systems::rotgap(0.6));
        let pts = scalar_points(&[-1.0, 0.0, 1.0, 1.0]);
        let rs = check_lipschitz_and_cone(&s, 0.0, &pts, &[(vec![0.1, 1.0], vec![0.0, 0.0])], 5.0).unwrap();
        assert!(rs.iter().all(|r| r.pass), "{:?}", rs.iter().map(|r| r.summary()).collect::<Vec<_>>());
        assert!((rs[0].measured - 1.0 / 3.0).abs() < 1e-3);
        assert_eq!(rs[0].details["skipped_pairs"], 1.0);
        assert_eq!(rs[2].details["max_down_crossings"], 1.0);
    }

    #[test]
    fn backward_growth_of_tanhline_is_tight() {
        let s = solver(systems::tanhline(0.5));
        let r = check_backward_growth(&s, 0.0, &scalar_points(&[1.0])).unwrap();
        assert!(r.pass, "{}", r.summary());
        assert_eq!(r.details["rate"], -1.0);
    }

    #[test]
    fn shooting_recovers_rotgap_slope() {
        let spec = systems::rotgap(0.6);
        let p = shooting_sigma(&spec, -1.0, 0.0, 1.0, 10.0, 0.01).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn gap_failure_is_a_passing_report() {
        let r = check_gap_fails(systems::rotgap(1.0), &GridConfig::default());
        assert!(r.pass);
        assert!(r.details["theta_min"] >= 1.0 - 1e-9);
        let r = check_gap_fails(systems::rotgap(0.5), &GridConfig::default());
        assert!(!r.pass);
    }
}

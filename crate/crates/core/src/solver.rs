//! Lyapunov–Perron fixed-point iterations for the invariant manifold `Σ`, the stable
//! manifold `Θ` and the derivative `D_ηΣ`, on truncated windows with composite
//! trapezoid quadrature and a-posteriori error bounds.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gap::GapCertificate;
use crate::linear::{certify_splitting, matmul, resolve_exponents, Anchor, SplittingCertificate};
use crate::problem::{validate_spec, Exponents, GridConfig, ProblemSpec};

/// Increments below this fraction of the iterate are treated as rounding noise.
const NOISE_FLOOR: f64 = 1e-12;
const RATIO_SLACK: f64 = 0.05;
const RATIO_STRIKES: usize = 3;
/// Twice the Richardson estimate `|Σ_h − Σ_{2h}|/3` of the trapezoid error.
const DISC_FACTOR: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    /// Also solve on the doubled step and report `2|Σ_h − Σ_{2h}|/3`.
    pub discretization_estimate: bool,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            discretization_estimate: true,
            max_iterations: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub last_increment: f64,
    pub increments: Vec<f64>,
    /// Ratios of successive increments above the noise floor.
    pub ratios: Vec<f64>,
    pub weighted_norm: f64,
    /// `θ*/(1−θ*)` times the last increment.
    pub apost_error: f64,
    pub tail_bound: f64,
    pub discretization_error: Option<f64>,
    /// Manifold value at `τ` after each sweep.
    pub boundary_history: Vec<Vec<f64>>,
}

impl SolveDiagnostics {
    /// Total error bound in the norm at `τ`.
    pub fn error_bound(&self) -> f64 {
        self.apost_error + self.tail_bound + self.discretization_error.unwrap_or(0.0)
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().cloned().fold(0.0, f64::max)
    }
}

/// Gridded trajectory on `[τ−T, τ]` (backward) or `[τ, τ+T]` (forward), ordered by time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySegment {
    pub tau: f64,
    pub h: f64,
    pub backward: bool,
    pub weight_exponent: f64,
    pub n: usize,
    /// Anchor node index of the first value.
    pub first_node: usize,
    pub values: Vec<f64>,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.values.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j * self.n..(j + 1) * self.n]
    }

    pub fn time(&self, j: usize) -> f64 {
        if self.backward {
            self.tau - (self.len() - 1 - j) as f64 * self.h
        } else {
            self.tau + j as f64 * self.h
        }
    }

    /// Index of the node at `τ`.
    pub fn tau_position(&self) -> usize {
        if self.backward {
            self.len() - 1
        } else {
            0
        }
    }
}

/// Gridded `n × k` matrices, stored row-major per node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorSegment {
    pub tau: f64,
    pub h: f64,
    pub n: usize,
    pub cols: usize,
    pub weight_exponent: f64,
    pub values: Vec<f64>,
}

impl OperatorSegment {
    pub fn len(&self) -> usize {
        self.values.len() / (self.n * self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matrix(&self, j: usize) -> DMatrix<f64> {
        let s = self.n * self.cols;
        DMatrix::from_row_slice(self.n, self.cols, &self.values[j * s..(j + 1) * s])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnstableSolution {
    pub segment: TrajectorySegment,
    pub sigma: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StableSolution {
    pub segment: TrajectorySegment,
    pub theta: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeSolution {
    pub segment: OperatorSegment,
    /// `(n−k) × n` matrix `D_ηΣ(τ,η)`; the S columns vanish.
    pub dsigma: Vec<Vec<f64>>,
    pub diagnostics: SolveDiagnostics,
}

/// Node set with stride-`s` propagators of both blocks.
struct Kernel<'a> {
    anchor: &'a Anchor,
    n: usize,
    k: usize,
    idx: Vec<usize>,
    tau_pos: usize,
    step: f64,
    /// `L_N(t_j, t_{j+1})`.
    pn: Vec<f64>,
    /// `L_S(t_{j+1}, t_j)`.
    ps: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(anchor: &'a Anchor, backward: bool, stride: usize, sigma: f64) -> Kernel<'a> {
        let fb = &anchor.fb;
        let n = fb.n;
        let k = fb.k;
        let d = n - k;
        let it = fb.tau_index();
        let m = anchor.window_nodes() / stride;
        let idx: Vec<usize> = if backward {
            (0..=m).map(|j| it - (m - j) * stride).collect()
        } else {
            (0..=m).map(|j| it + j * stride).collect()
        };
        let mut pn = Vec::with_capacity(m * k * k);
        let mut ps = Vec::with_capacity(m * d * d);
        let mut bn = vec![0.0; k * k];
        let mut bs = vec![0.0; d * d];
        for j in 0..m {
            let i0 = idx[j];
            let mut acc_n = fb.n_step_down(i0).to_vec();
            let mut acc_s = fb.s_step_up(i0).to_vec();
            for r in 1..stride {
                // L_N(t_j, t_j + (r+1)h) = L_N(t_j, t_j + rh) L_N(t_j + rh, t_j + (r+1)h)
                matmul(&acc_n, fb.n_step_down(i0 + r), k, k, k, &mut bn);
                acc_n.copy_from_slice(&bn);
                matmul(fb.s_step_up(i0 + r), &acc_s, d, d, d, &mut bs);
                acc_s.copy_from_slice(&bs);
            }
            pn.extend_from_slice(&acc_n);
            ps.extend_from_slice(&acc_s);
        }
        let weights = idx
            .iter()
            .map(|&i| (sigma * (fb.time(i) - fb.tau)).exp())
            .collect();
        Kernel {
            anchor,
            n,
            k,
            tau_pos: if backward { m } else { 0 },
            idx,
            step: stride as f64 * fb.h,
            pn,
            ps,
            weights,
        }
    }

    fn len(&self) -> usize {
        self.idx.len()
    }

    fn time(&self, j: usize) -> f64 {
        self.anchor.fb.time(self.idx[j])
    }

    /// `L_N(t_j, τ) x` for every node at or below `τ`, written into `out` (len × k × cols).
    fn affine_n(&self, x: &[f64], cols: usize, out: &mut [f64]) {
        let k = self.k;
        let w = k * cols;
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.tau_pos;
        out[p * w..(p + 1) * w].copy_from_slice(x);
        for j in (0..p).rev() {
            let (lo, hi) = out.split_at_mut((j + 1) * w);
            matmul(&self.pn[j * k * k..(j + 1) * k * k], &hi[..w], k, k, cols, &mut lo[j * w..]);
        }
    }

    /// `L_S(t_j, τ) x` for every node at or above `τ`.
    fn affine_s(&self, x: &[f64], cols: usize, out: &mut [f64]) {
        let d = self.n - self.k;
        let w = d * cols;
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.tau_pos;
        out[p * w..(p + 1) * w].copy_from_slice(x);
        for j in p + 1..self.len() {
            let (lo, hi) = out.split_at_mut(j * w);
            matmul(&self.ps[(j - 1) * d * d..j * d * d], &lo[(j - 1) * w..], d, d, cols, &mut hi[..w]);
        }
    }

    /// One application of the operator: given `F_j` (len × n × cols) and the affine parts,
    /// writes `q_j = a_j − ∫_{t_j}^{t_top} L_N F_N` and `p_j = b_j + ∫_{t_0}^{t_j} L_S F_S`.
    fn sweep(&self, f: &[f64], cols: usize, aff_n: &[f64], aff_s: &[f64], out: &mut [f64]) {
        let n = self.n;
        let k = self.k;
        let d = n - k;
        let len = self.len();
        let half = 0.5 * self.step;
        let row = n * cols;
        let mut acc = vec![0.0; k.max(d) * cols];
        let mut tmp = vec![0.0; k.max(d) * cols];

        // N part, downward from the top node.
        acc[..k * cols].iter_mut().for_each(|v| *v = 0.0);
        for j in (0..len).rev() {
            if j + 1 < len {
                for (r, a) in acc[..k * cols].iter_mut().enumerate() {
                    *a += half * f[(j + 1) * row + r];
                }
                matmul(&self.pn[j * k * k..(j + 1) * k * k], &acc[..k * cols], k, k, cols, &mut tmp[..k * cols]);
                for (r, a) in acc[..k * cols].iter_mut().enumerate() {
                    *a = tmp[r] + half * f[j * row + r];
                }
            }
            for r in 0..k * cols {
                out[j * row + r] = aff_n[j * k * cols + r] - acc[r];
            }
        }

        // S part, upward from the bottom node.
        let so = k * cols;
        acc[..d * cols].iter_mut().for_each(|v| *v = 0.0);
        for j in 0..len {
            if j > 0 {
                for (r, a) in acc[..d * cols].iter_mut().enumerate() {
                    *a += half * f[(j - 1) * row + so + r];
                }
                matmul(&self.ps[(j - 1) * d * d..j * d * d], &acc[..d * cols], d, d, cols, &mut tmp[..d * cols]);
                for (r, a) in acc[..d * cols].iter_mut().enumerate() {
                    *a = tmp[r] + half * f[j * row + so + r];
                }
            }
            for r in 0..d * cols {
                out[j * row + so + r] = aff_s[j * d * cols + r] + acc[r];
            }
        }
    }

    /// `max_j e^{σ(t_j−τ)} max_c ‖x_j e_c‖_{t_j} / scale_c`.
    fn weighted_norm(&self, x: &[f64], cols: usize, scale: &[f64]) -> f64 {
        let n = self.n;
        let mut col = vec![0.0; n];
        let mut best: f64 = 0.0;
        for j in 0..self.len() {
            let base = j * n * cols;
            for c in 0..cols {
                for r in 0..n {
                    col[r] = x[base + r * cols + c];
                }
                let v = self.weights[j] * self.anchor.moving_norm_at(self.idx[j], &col) / scale[c];
                best = best.max(v);
            }
        }
        best
    }
}

/// Runs the Picard iteration for the operator with right-hand side `rhs`.
#[allow(clippy::too_many_arguments)]
fn iterate(
    kernel: &Kernel,
    cols: usize,
    aff_n: &[f64],
    aff_s: &[f64],
    scale: &[f64],
    gap: &GapCertificate,
    tol: f64,
    max_iterations: usize,
    mut rhs: impl FnMut(usize, &[f64], &mut [f64]) -> Result<()>,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let n = kernel.n;
    let len = kernel.len();
    let row = n * cols;
    let mut z = vec![0.0; len * row];
    // z₀ is the affine part of the operator.
    for j in 0..len {
        for r in 0..kernel.k * cols {
            z[j * row + r] = aff_n[j * kernel.k * cols + r];
        }
        for r in 0..(n - kernel.k) * cols {
            z[j * row + kernel.k * cols + r] = aff_s[j * (n - kernel.k) * cols + r];
        }
    }
    let mut f = vec![0.0; len * row];
    let mut next = vec![0.0; len * row];
    let mut diff = vec![0.0; len * row];
    let theta = gap.theta_star;
    let mut diag = SolveDiagnostics {
        iterations: 0,
        last_increment: f64::INFINITY,
        increments: Vec::new(),
        ratios: Vec::new(),
        weighted_norm: 0.0,
        apost_error: f64::INFINITY,
        tail_bound: 0.0,
        discretization_error: None,
        boundary_history: Vec::new(),
    };
    let mut strikes = 0;
    let mut prev: Option<f64> = None;
    let tp = kernel.tau_pos;
    loop {
        if diag.iterations >= max_iterations {
            return Err(Error::IterationLimit(max_iterations));
        }
        for j in 0..len {
            rhs(j, &z[j * row..(j + 1) * row], &mut f[j * row..(j + 1) * row])?;
        }
        kernel.sweep(&f, cols, aff_n, aff_s, &mut next);
        for ((d, a), b) in diff.iter_mut().zip(&next).zip(&z) {
            *d = a - b;
        }
        let incr = kernel.weighted_norm(&diff, cols, scale);
        std::mem::swap(&mut z, &mut next);
        diag.iterations += 1;
        let norm = kernel.weighted_norm(&z, cols, scale);
        diag.weighted_norm = norm;
        diag.increments.push(incr);
        diag.boundary_history.push(z[tp * row..(tp + 1) * row].to_vec());
        let floor = NOISE_FLOOR * norm.max(1.0);
        if let Some(p) = prev {
            if p > floor && incr > floor {
                let ratio = incr / p;
                diag.ratios.push(ratio);
                if ratio > theta + RATIO_SLACK {
                    strikes += 1;
                    if strikes >= RATIO_STRIKES {
                        return Err(Error::NonContraction {
                            ratio,
                            limit: theta + RATIO_SLACK,
                            iteration: diag.iterations,
                        });
                    }
                } else {
                    strikes = 0;
                }
            }
        }
        prev = Some(incr);
        if !incr.is_finite() || !norm.is_finite() {
            return Err(Error::NonContraction {
                ratio: f64::INFINITY,
                limit: theta + RATIO_SLACK,
                iteration: diag.iterations,
            });
        }
        if incr <= tol * norm.max(1.0) {
            diag.last_increment = incr;
            diag.apost_error = theta / (1.0 - theta) * incr;
            return Ok((z, diag));
        }
    }
}

/// Tail coefficients of the truncated integrals: `(L₂/(γ−σ))e^{−(γ−σ)T}` for the
/// backward window and `(L₁/(σ−ρ))e^{−(σ−ρ)T}` for the forward one.
pub fn tail_coefficient(gap: &GapCertificate, backward: bool, t_window: f64) -> f64 {
    let s = gap.sigma_star;
    if backward {
        gap.l2 / (gap.gamma - s) * (-(gap.gamma - s) * t_window).exp()
    } else if gap.l1 == 0.0 {
        0.0
    } else {
        gap.l1 / (s - gap.rho) * (-(s - gap.rho) * t_window).exp()
    }
}

fn check_tail(gap: &GapCertificate, backward: bool, t_window: f64, tail_tol: f64) -> Result<f64> {
    let c = tail_coefficient(gap, backward, t_window);
    if c > tail_tol {
        return Err(Error::TailTooLarge { bound: c, tol: tail_tol });
    }
    Ok(c)
}

struct RawSolve {
    values: Vec<f64>,
    diag: SolveDiagnostics,
    first_node: usize,
}

fn solve_trajectory(
    spec: &ProblemSpec,
    anchor: &Anchor,
    gap: &GapCertificate,
    eta: &[f64],
    tol: f64,
    backward: bool,
    stride: usize,
    max_iterations: usize,
) -> Result<RawSolve> {
    let kernel = Kernel::new(anchor, backward, stride, gap.sigma_star);
    let n = spec.n;
    let k = spec.k;
    let len = kernel.len();
    let mut aff_n = vec![0.0; len * k];
    let mut aff_s = vec![0.0; len * (n - k)];
    if backward {
        kernel.affine_n(&eta[..k], 1, &mut aff_n);
    } else {
        kernel.affine_s(&eta[k..], 1, &mut aff_s);
    }
    let times: Vec<f64> = (0..len).map(|j| kernel.time(j)).collect();
    let (values, diag) = iterate(&kernel, 1, &aff_n, &aff_s, &[1.0], gap, tol, max_iterations, |j, z, out| {
        spec.eval_f(times[j], z, out)
    })?;
    Ok(RawSolve {
        values,
        diag,
        first_node: kernel.idx[0],
    })
}

fn coarse_error(anchor: &Anchor, fine: &[f64], coarse: &[f64], backward: bool) -> f64 {
    let it = anchor.fb.tau_index();
    let diff: Vec<f64> = fine.iter().zip(coarse).map(|(a, b)| a - b).collect();
    let v = if backward {
        anchor.s_norm_at(it, &diff)
    } else {
        anchor.n_norm_at(it, &diff)
    };
    DISC_FACTOR * v
}

/// Fixed point of the backward operator through `Qη`; `Σ(τ,η)` is its S part at `τ`.
pub fn solve_unstable(
    spec: &ProblemSpec,
    anchor: &Anchor,
    gap: &GapCertificate,
    eta: &[f64],
    grid: &GridConfig,
    opts: &SolveOptions,
) -> Result<UnstableSolution> {
    let t_window = anchor.window_nodes() as f64 * anchor.fb.h;
    let coef = check_tail(gap, true, t_window, grid.tail_tol)?;
    let raw = solve_trajectory(spec, anchor, gap, eta, grid.tol_fixed_point, true, 1, opts.max_iterations)?;
    let n = spec.n;
    let k = spec.k;
    let len = raw.values.len() / n;
    let sigma = raw.values[(len - 1) * n + k..len * n].to_vec();
    let mut diag = raw.diag;
    diag.tail_bound = coef * diag.weighted_norm;
    diag.boundary_history.iter_mut().for_each(|b| {
        b.drain(..k);
    });
    if opts.discretization_estimate {
        let coarse = solve_trajectory(spec, anchor, gap, eta, grid.tol_fixed_point, true, 2, opts.max_iterations)?;
        let cl = coarse.values.len() / n;
        let cs = &coarse.values[(cl - 1) * n + k..cl * n];
        diag.discretization_error = Some(coarse_error(anchor, &sigma, cs, true));
    }
    Ok(UnstableSolution {
        segment: TrajectorySegment {
            tau: anchor.tau(),
            h: anchor.fb.h,
            backward: true,
            weight_exponent: gap.sigma_star,
            n,
            first_node: raw.first_node,
            values: raw.values,
        },
        sigma,
        diagnostics: diag,
    })
}

/// Fixed point of the forward operator through `(I−Q)η`; `Θ(τ,η)` is its N part at `τ`.
pub fn solve_stable(
    spec: &ProblemSpec,
    anchor: &Anchor,
    gap: &GapCertificate,
    eta: &[f64],
    grid: &GridConfig,
    opts: &SolveOptions,
) -> Result<StableSolution> {
    let t_window = anchor.window_nodes() as f64 * anchor.fb.h;
    let coef = check_tail(gap, false, t_window, grid.tail_tol)?;
    let raw = solve_trajectory(spec, anchor, gap, eta, grid.tol_fixed_point, false, 1, opts.max_iterations)?;
    let n = spec.n;
    let k = spec.k;
    let theta = raw.values[..k].to_vec();
    let mut diag = raw.diag;
    diag.tail_bound = coef * diag.weighted_norm;
    diag.boundary_history.iter_mut().for_each(|b| b.truncate(k));
    if opts.discretization_estimate {
        let coarse = solve_trajectory(spec, anchor, gap, eta, grid.tol_fixed_point, false, 2, opts.max_iterations)?;
        diag.discretization_error = Some(coarse_error(anchor, &theta, &coarse.values[..k], false));
    }
    Ok(StableSolution {
        segment: TrajectorySegment {
            tau: anchor.tau(),
            h: anchor.fb.h,
            backward: false,
            weight_exponent: gap.sigma_star,
            n,
            first_node: raw.first_node,
            values: raw.values,
        },
        theta,
        diagnostics: diag,
    })
}

fn solve_linearised(
    spec: &ProblemSpec,
    anchor: &Anchor,
    gap: &GapCertificate,
    base: &TrajectorySegment,
    tol: f64,
    stride: usize,
    max_iterations: usize,
) -> Result<(Vec<f64>, SolveDiagnostics, usize)> {
    let kernel = Kernel::new(anchor, true, stride, gap.sigma_star);
    let n = spec.n;
    let k = spec.k;
    let len = kernel.len();
    let it = anchor.fb.tau_index();
    let mut eye = vec![0.0; k * k];
    for c in 0..k {
        eye[c * k + c] = 1.0;
    }
    let mut aff_n = vec![0.0; len * k * k];
    let aff_s = vec![0.0; len * (n - k) * k];
    kernel.affine_n(&eye, k, &mut aff_n);
    // Columns are measured relative to ‖e_c‖_τ.
    let scale: Vec<f64> = (0..k)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            anchor.moving_norm_at(it, &e)
        })
        .collect();
    let mut jac = vec![0.0; len * n * n];
    for j in 0..len {
        let bj = kernel.idx[j] - base.first_node;
        spec.jacobian_into(kernel.time(j), base.value(bj), &mut jac[j * n * n..(j + 1) * n * n])?;
    }
    let (values, diag) = iterate(&kernel, k, &aff_n, &aff_s, &scale, gap, tol, max_iterations, |j, z, out| {
        matmul(&jac[j * n * n..(j + 1) * n * n], z, n, n, k, out);
        Ok(())
    })?;
    Ok((values, diag, len))
}

fn dsigma_from(values: &[f64], len: usize, n: usize, k: usize) -> Vec<Vec<f64>> {
    let base = (len - 1) * n * k;
    (k..n)
        .map(|r| {
            let mut row = vec![0.0; n];
            for c in 0..k {
                row[c] = values[base + r * k + c];
            }
            row
        })
        .collect()
}

/// Fixed point of the linearised operator along `base`; returns `D_ηΣ(τ,η)`.
pub fn solve_derivative(
    spec: &ProblemSpec,
    anchor: &Anchor,
    gap: &GapCertificate,
    base: &UnstableSolution,
    grid: &GridConfig,
    opts: &SolveOptions,
) -> Result<DerivativeSolution> {
    let n = spec.n;
    let k = spec.k;
    let t_window = anchor.window_nodes() as f64 * anchor.fb.h;
    let coef = check_tail(gap, true, t_window, grid.tail_tol)?;
    let (values, mut diag, len) =
        solve_linearised(spec, anchor, gap, &base.segment, grid.tol_fixed_point, 1, opts.max_iterations)?;
    let dsigma = dsigma_from(&values, len, n, k);
    diag.tail_bound = coef * diag.weighted_norm;
    diag.boundary_history.clear();
    if opts.discretization_estimate {
        let (cv, _, cl) =
            solve_linearised(spec, anchor, gap, &base.segment, grid.tol_fixed_point, 2, opts.max_iterations)?;
        let coarse = dsigma_from(&cv, cl, n, k);
        let err = dsigma
            .iter()
            .flatten()
            .zip(coarse.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        diag.discretization_error = Some(DISC_FACTOR * err);
    }
    Ok(DerivativeSolution {
        segment: OperatorSegment {
            tau: anchor.tau(),
            h: anchor.fb.h,
            n,
            cols: k,
            weight_exponent: gap.sigma_star,
            values,
        },
        dsigma,
        diagnostics: diag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointDiagnostics {
    pub iterations: usize,
    pub last_increment: f64,
    pub apost_error: f64,
    pub tail_bound: f64,
    pub discretization_error: Option<f64>,
    pub max_ratio: f64,
}

impl From<&SolveDiagnostics> for PointDiagnostics {
    fn from(d: &SolveDiagnostics) -> Self {
        PointDiagnostics {
            iterations: d.iterations,
            last_increment: d.last_increment,
            apost_error: d.apost_error,
            tail_bound: d.tail_bound,
            discretization_error: d.discretization_error,
            max_ratio: d.max_ratio(),
        }
    }
}

impl PointDiagnostics {
    pub fn error_bound(&self) -> f64 {
        self.apost_error + self.tail_bound + self.discretization_error.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartPoint {
    pub q: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub diagnostics: Option<PointDiagnostics>,
    pub error: Option<String>,
}

/// Sampled graph `{(q_i, Σ(τ,q_i))}` at one base time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifoldChart {
    pub tau: f64,
    pub points: Vec<ChartPoint>,
    /// Pairs violating `|ΔΣ|_S ≤ κ_Σ|Δq|_N + 2·(error bounds)`.
    pub lipschitz_violations: Vec<(usize, usize)>,
    /// Base points at the origin whose image exceeds its error bound.
    pub zero_violations: Vec<usize>,
}

impl ManifoldChart {
    pub fn is_consistent(&self) -> bool {
        self.lipschitz_violations.is_empty()
            && self.zero_violations.is_empty()
            && self.points.iter().all(|p| p.error.is_none())
    }
}

/// Solves every base point independently and checks the chart invariants.
pub fn sample_chart(
    spec: &ProblemSpec,
    anchor: &Anchor,
    gap: &GapCertificate,
    base_points: &[Vec<f64>],
    grid: &GridConfig,
    opts: &SolveOptions,
) -> ManifoldChart {
    let n = spec.n;
    let k = spec.k;
    let points: Vec<ChartPoint> = base_points
        .par_iter()
        .map(|q| {
            let mut eta = vec![0.0; n];
            eta[..k].copy_from_slice(q);
            match solve_unstable(spec, anchor, gap, &eta, grid, opts) {
                Ok(sol) => ChartPoint {
                    q: q.clone(),
                    diagnostics: Some(PointDiagnostics::from(&sol.diagnostics)),
                    sigma: Some(sol.sigma),
                    error: None,
                },
                Err(e) => ChartPoint {
                    q: q.clone(),
                    sigma: None,
                    diagnostics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let it = anchor.fb.tau_index();
    let mut lipschitz_violations = Vec::new();
    let mut zero_violations = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (Some(si), Some(di)) = (&p.sigma, &p.diagnostics) else { continue };
        if p.q.iter().all(|v| *v == 0.0) && anchor.s_norm_at(it, si) > di.error_bound() + grid.tol_fixed_point {
            zero_violations.push(i);
        }
        for (j, r) in points.iter().enumerate().skip(i + 1) {
            let (Some(sj), Some(dj)) = (&r.sigma, &r.diagnostics) else { continue };
            let dq: Vec<f64> = p.q.iter().zip(&r.q).map(|(a, b)| a - b).collect();
            let ds: Vec<f64> = si.iter().zip(sj).map(|(a, b)| a - b).collect();
            let lhs = anchor.s_norm_at(it, &ds);
            let rhs = gap.kappa_sigma * anchor.n_norm_at(it, &dq) + 2.0 * (di.error_bound() + dj.error_bound());
            if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                lipschitz_violations.push((i, j));
            }
        }
    }
    ManifoldChart {
        tau: anchor.tau(),
        points,
        lipschitz_violations,
        zero_violations,
    }
}

/// Problem, grid, exponents and gap certificate bundled for repeated solves.
#[derive(Debug, Clone)]
pub struct ManifoldSolver {
    pub spec: ProblemSpec,
    pub grid: GridConfig,
    pub exponents: Exponents,
    pub exponents_estimated: bool,
    pub gap: GapCertificate,
    pub options: SolveOptions,
}

impl ManifoldSolver {
    /// Validates the problem and computes the gap certificate.
    pub fn new(spec: ProblemSpec, grid: GridConfig) -> Result<ManifoldSolver> {
        validate_spec(&spec, &grid)?;
        let (ex, estimated) = resolve_exponents(&spec, 0.0, &grid)?;
        let gap = GapCertificate::compute(ex.gamma, ex.rho, spec.l1, spec.l2, spec.gamma_norm)?;
        Ok(ManifoldSolver {
            spec,
            grid,
            exponents: ex,
            exponents_estimated: estimated,
            gap,
            options: SolveOptions::default(),
        })
    }

    pub fn with_options(mut self, options: SolveOptions) -> Self {
        self.options = options;
        self
    }

    pub fn anchor(&self, tau: f64) -> Result<Anchor> {
        Anchor::new(&self.spec, &self.grid, self.exponents, tau)
    }

    pub fn certify(&self, anchor: &Anchor) -> Result<SplittingCertificate> {
        certify_splitting(&anchor.fb, self.spec.ambient, self.exponents.gamma, self.exponents.rho)
    }

    pub fn solve_unstable(&self, anchor: &Anchor, eta: &[f64]) -> Result<UnstableSolution> {
        solve_unstable(&self.spec, anchor, &self.gap, eta, &self.grid, &self.options)
    }

    pub fn solve_stable(&self, anchor: &Anchor, eta: &[f64]) -> Result<StableSolution> {
        solve_stable(&self.spec, anchor, &self.gap, eta, &self.grid, &self.options)
    }

    pub fn solve_derivative(&self, anchor: &Anchor, base: &UnstableSolution) -> Result<DerivativeSolution> {
        solve_derivative(&self.spec, anchor, &self.gap, base, &self.grid, &self.options)
    }

    pub fn sample_chart(&self, anchor: &Anchor, base_points: &[Vec<f64>]) -> ManifoldChart {
        sample_chart(&self.spec, anchor, &self.gap, base_points, &self.grid, &self.options)
    }

    /// `Σ(t, q)` at a fresh base time.
    pub fn sigma_at(&self, t: f64, q: &[f64]) -> Result<(Anchor, UnstableSolution)> {
        let anchor = self.anchor(t)?;
        let mut eta = vec![0.0; self.spec.n];
        eta[..self.spec.k].copy_from_slice(q);
        let sol = self.solve_unstable(&anchor, &eta)?;
        Ok((anchor, sol))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;

    fn solver(spec: ProblemSpec) -> ManifoldSolver {
        ManifoldSolver::new(spec, GridConfig::default()).unwrap()
    }

    #[test]
    fn linear_problem_has_flat_manifold() {
        let s = solver(systems::linear_only());
        let a = s.anchor(0.0).unwrap();
        let sol = s.solve_unstable(&a, &[1.3, 0.7]).unwrap();
        assert_eq!(sol.sigma, vec![0.0]);
        assert_eq!(sol.diagnostics.iterations, 1);
        for j in 0..sol.segment.len() {
            let t = sol.segment.time(j);
            let z = sol.segment.value(j);
            assert!((z[0] - 1.3 * t.exp()).abs() <= 1e-9 * 1.3);
            assert_eq!(z[1], 0.0);
        }
        let st = s.solve_stable(&a, &[0.4, 1.0]).unwrap();
        assert_eq!(st.theta, vec![0.0]);
        let d = s.solve_derivative(&a, &sol).unwrap();
        assert_eq!(d.dsigma, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn rotgap_slope_and_stable_slope() {
        let s = solver(systems::rotgap(0.6));
        let a = s.anchor(0.0).unwrap();
        let sol = s.solve_unstable(&a, &[1.0, 0.0]).unwrap();
        assert!((sol.sigma[0] - 1.0 / 3.0).abs() <= 1e-4, "{}", sol.sigma[0]);
        assert!(sol.diagnostics.max_ratio() <= 0.6 + 0.05);
        let st = s.solve_stable(&a, &[0.0, 1.0]).unwrap();
        assert!((st.theta[0] - 1.0 / 3.0).abs() <= 1e-4, "{}", st.theta[0]);
        let d = s.solve_derivative(&a, &sol).unwrap();
        assert!((d.dsigma[0][0] - 1.0 / 3.0).abs() <= 1e-4);
        assert_eq!(d.dsigma[0][1], 0.0);
    }

    #[test]
    fn tanhline_values() {
        let s = solver(systems::tanhline(0.5));
        let a = s.anchor(0.0).unwrap();
        let sol = s.solve_unstable(&a, &[1.0, 0.0]).unwrap();
        let exact = 0.5 * 1f64.cosh().ln();
        assert!((sol.sigma[0] - exact).abs() <= 1e-4);
        assert!((exact - 0.2168904152).abs() < 1e-9);
        let st = s.solve_stable(&a, &[0.0, 2.5]).unwrap();
        assert!(st.theta[0].abs() <= 1e-6);
    }

    #[test]
    fn result_depends_only_on_the_projection() {
        for spec in [systems::rotgap(0.5), systems::tanhline(0.5)] {
            let s = solver(spec);
            let a = s.anchor(0.0).unwrap();
            let x = s.solve_unstable(&a, &[0.8, 0.0]).unwrap();
            let y = s.solve_unstable(&a, &[0.8, -3.0]).unwrap();
            assert!((x.sigma[0] - y.sigma[0]).abs() <= 2.0 * x.diagnostics.error_bound());
            let p = s.solve_stable(&a, &[0.0, 0.9]).unwrap();
            let r = s.solve_stable(&a, &[5.0, 0.9]).unwrap();
            assert!((p.theta[0] - r.theta[0]).abs() <= 2.0 * p.diagnostics.error_bound() + 1e-15);
        }
    }

    #[test]
    fn zero_is_preserved() {
        let s = solver(systems::tanhline(0.5));
        let a = s.anchor(0.0).unwrap();
        let sol = s.solve_unstable(&a, &[0.0, 4.0]).unwrap();
        assert!(sol.segment.values.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn fixed_point_residual_is_small() {
        let s = solver(systems::tanhline(0.5));
        let a = s.anchor(0.0).unwrap();
        let sol = s.solve_unstable(&a, &[1.5, 0.0]).unwrap();
        let kernel = Kernel::new(&a, true, 1, s.gap.sigma_star);
        let n = 2;
        let len = kernel.len();
        let mut aff_n = vec![0.0; len];
        let aff_s = vec![0.0; len];
        kernel.affine_n(&[1.5], 1, &mut aff_n);
        let mut f = vec![0.0; len * n];
        for j in 0..len {
            s.spec.eval_f(kernel.time(j), sol.segment.value(j), &mut f[j * n..(j + 1) * n]).unwrap();
        }
        let mut out = vec![0.0; len * n];
        kernel.sweep(&f, 1, &aff_n, &aff_s, &mut out);
        let diff: Vec<f64> = out.iter().zip(&sol.segment.values).map(|(a, b)| a - b).collect();
        let r = kernel.weighted_norm(&diff, 1, &[1.0]);
        assert!(r <= 2.0 * s.grid.tol_fixed_point * sol.diagnostics.weighted_norm.max(1.0));
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for (spec, q) in [(systems::tanhline(0.5), 1.0), (systems::rotgap(0.6), 0.7)] {
            let s = solver(spec);
            let a = s.anchor(0.0).unwrap();
            let base = s.solve_unstable(&a, &[q, 0.0]).unwrap();
            let d = s.solve_derivative(&a, &base).unwrap().dsigma[0][0];
            let h = 1e-4;
            let up = s.solve_unstable(&a, &[q + h, 0.0]).unwrap().sigma[0];
            let dn = s.solve_unstable(&a, &[q - h, 0.0]).unwrap().sigma[0];
            let fd = (up - dn) / (2.0 * h);
            assert!((d - fd).abs() <= 1e-4 * (1.0 + d.abs()), "{d} vs {fd}");
        }
    }

    #[test]
    fn tanhline_derivative_oracle() {
        let s = solver(systems::tanhline(0.5));
        let a = s.anchor(0.0).unwrap();
        let base = s.solve_unstable(&a, &[1.0, 0.0]).unwrap();
        let d = s.solve_derivative(&a, &base).unwrap();
        let exact = 0.5 * (1f64.tanh() - 1f64.cosh().ln());
        assert!((d.dsigma[0][0] - exact).abs() <= 1e-4);
        assert!(d.diagnostics.max_ratio() <= s.gap.theta_star + 0.05);
    }

    #[test]
    fn chart_examples() {
        let s = solver(systems::rotgap(0.6));
        let a = s.anchor(0.0).unwrap();
        let qs: Vec<Vec<f64>> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|q| vec![*q]).collect();
        let chart = s.sample_chart(&a, &qs);
        assert!(chart.is_consistent());
        for p in &chart.points {
            assert!((p.sigma.as_ref().unwrap()[0] - p.q[0] / 3.0).abs() <= 1e-4);
        }
        assert!(s.sample_chart(&a, &[]).points.is_empty());

        let t = solver(systems::tanhline(0.5));
        let a = t.anchor(0.0).unwrap();
        let qs: Vec<Vec<f64>> = [0.5, 1.0, 2.0].iter().map(|q| vec![*q]).collect();
        let chart = t.sample_chart(&a, &qs);
        for p in &chart.points {
            let q = p.q[0];
            let e = 0.5 * q.cosh().ln() / q;
            assert!((p.sigma.as_ref().unwrap()[0] - e).abs() <= 1e-4);
            assert!((systems::tanhline_sigma(0.5, q) - e).abs() <= 1e-15);
        }
    }

    #[test]
    fn windows_too_short_for_the_tail_are_refused() {
        let grid = GridConfig { t_window: 2.0, t_norm: Some(2.0), ..GridConfig::default() };
        let s = ManifoldSolver::new(systems::rotgap(0.6), grid).unwrap();
        let a = s.anchor(0.0).unwrap();
        assert!(matches!(s.solve_unstable(&a, &[1.0, 0.0]), Err(Error::TailTooLarge { .. })));
    }

    #[test]
    fn understated_lipschitz_constant_is_caught() {
        // f = 0.9(−u₂, u₁) declared with L = 0.2 contracts far slower than θ* = 0.2.
        let mut spec = systems::rotgap(0.9);
        spec.l1 = 0.2;
        spec.l2 = 0.2;
        let s = solver(spec);
        let a = s.anchor(0.0).unwrap();
        assert!(matches!(
            s.solve_unstable(&a, &[1.0, 0.0]),
            Err(Error::NonContraction { .. })
        ));
    }

    #[test]
    fn multidimensional_stable_block() {
        let s = solver(systems::rotating_decay());
        let grid = GridConfig { t_window: 25.0, t_norm: Some(5.0), ..GridConfig::default() };
        let s = ManifoldSolver { grid, ..s };
        let a = s.anchor(0.0).unwrap();
        let sol = s.solve_unstable(&a, &[1.0, 0.0, 0.0]).unwrap();
        // Σ is time independent and q' = q, so A_S Σ + f_S(q, Σ) = DΣ·q.
        let d = s.solve_derivative(&a, &sol).unwrap();
        let q: f64 = 1.0;
        let (s1, s2) = (sol.sigma[0], sol.sigma[1]);
        let lhs1 = -s1 + 2.0 * s2 + 0.2 * q.tanh();
        let lhs2 = -2.0 * s1 - s2;
        assert!((lhs1 - d.dsigma[0][0] * q).abs() < 1e-4);
        assert!((lhs2 - d.dsigma[1][0] * q).abs() < 1e-4);
    }
}

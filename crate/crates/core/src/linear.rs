//! The linear evolution process `L(t,s)` of the block-diagonal part, exponential
//! splitting certificates, and the time-dependent norms built from it.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::{AdmissibleNorm, AmbientNorm, Block, Exponents, GridConfig, ProblemSpec};

const RK4_SUBSTEPS: usize = 4;
const MAX_CONDITION: f64 = 1e12;

/// Row-major product `a (p×q) * b (q×r)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for l in 0..q {
                s += a[i * q + l] * b[l * r + j];
            }
            out[i * r + j] = s;
        }
    }
}

#[inline]
pub(crate) fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * d..(i + 1) * d];
        *o = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn invert(m: &[f64], d: usize) -> Option<Vec<f64>> {
    if d == 1 {
        return (m[0] != 0.0).then(|| vec![1.0 / m[0]]);
    }
    let inv = DMatrix::from_row_slice(d, d, m).try_inverse()?;
    Some(inv.transpose().as_slice().to_vec())
}

fn max_op(m: &[f64], d: usize) -> f64 {
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// RK4 flow of `M' = A_b(t) M` over one grid step from `t0` to `t0 + dt`, starting at I.
fn one_step(spec: &ProblemSpec, b: Block, t0: f64, dt: f64) -> Result<Vec<f64>> {
    let d = spec.block_dim(b);
    let mut m = identity(d);
    let sub = dt / RK4_SUBSTEPS as f64;
    let mut a0 = vec![0.0; d * d];
    let mut a1 = vec![0.0; d * d];
    let mut a2 = vec![0.0; d * d];
    let mut k1 = vec![0.0; d * d];
    let mut k2 = vec![0.0; d * d];
    let mut k3 = vec![0.0; d * d];
    let mut k4 = vec![0.0; d * d];
    let mut tmp = vec![0.0; d * d];
    for s in 0..RK4_SUBSTEPS {
        let t = t0 + s as f64 * sub;
        spec.a_block_into(b, t, &mut a0)?;
        spec.a_block_into(b, t + 0.5 * sub, &mut a1)?;
        spec.a_block_into(b, t + sub, &mut a2)?;
        matmul(&a0, &m, d, d, d, &mut k1);
        for i in 0..d * d {
            tmp[i] = m[i] + 0.5 * sub * k1[i];
        }
        matmul(&a1, &tmp, d, d, d, &mut k2);
        for i in 0..d * d {
            tmp[i] = m[i] + 0.5 * sub * k2[i];
        }
        matmul(&a1, &tmp, d, d, d, &mut k3);
        for i in 0..d * d {
            tmp[i] = m[i] + sub * k3[i];
        }
        matmul(&a2, &tmp, d, d, d, &mut k4);
        for i in 0..d * d {
            m[i] += sub / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(m)
}

/// Fundamental matrices of both diagonal blocks on a uniform grid containing `τ`,
/// normalised to the identity at `τ`, together with one-step propagators.
#[derive(Debug, Clone)]
pub struct FundamentalBlocks {
    pub tau: f64,
    pub h: f64,
    pub n: usize,
    pub k: usize,
    i_tau: usize,
    len: usize,
    phi_n: Vec<f64>,
    phi_s: Vec<f64>,
    /// `L_N(t_i, t_{i+1})`, backward one-step maps of the N block.
    n_down: Vec<f64>,
    /// `L_N(t_{i+1}, t_i)`.
    n_up: Vec<f64>,
    /// `L_S(t_{i+1}, t_i)`, forward one-step maps of the S block.
    s_up: Vec<f64>,
    /// `L_S(t_i, t_{i+1})`.
    s_down: Vec<f64>,
}

/// Integrates both blocks over `[τ − back, τ + fwd]` with step `h`.
pub fn integrate_fundamental_span(
    spec: &ProblemSpec,
    tau: f64,
    back: f64,
    fwd: f64,
    h: f64,
) -> Result<FundamentalBlocks> {
    let nb = (back / h).ceil() as usize;
    let nf = (fwd / h).ceil() as usize;
    let len = nb + nf + 1;
    let k = spec.k;
    let m = spec.n - k;
    let time = |i: usize| tau + (i as f64 - nb as f64) * h;

    let steps: Vec<(Vec<f64>, Vec<f64>)> = (0..len - 1)
        .map(|i| {
            let nd = one_step(spec, Block::N, time(i + 1), -h)?;
            let su = one_step(spec, Block::S, time(i), h)?;
            Ok((nd, su))
        })
        .collect::<Result<_>>()?;

    let mut n_down = Vec::with_capacity((len - 1) * k * k);
    let mut n_up = Vec::with_capacity((len - 1) * k * k);
    let mut s_up = Vec::with_capacity((len - 1) * m * m);
    let mut s_down = Vec::with_capacity((len - 1) * m * m);
    for (i, (nd, su)) in steps.iter().enumerate() {
        let t = time(i);
        let nu = invert(nd, k).ok_or(Error::IllConditioned {
            block: "N",
            t,
            cond: f64::INFINITY,
        })?;
        let sd = invert(su, m).ok_or(Error::IllConditioned {
            block: "S",
            t,
            cond: f64::INFINITY,
        })?;
        n_down.extend_from_slice(nd);
        n_up.extend_from_slice(&nu);
        s_up.extend_from_slice(su);
        s_down.extend_from_slice(&sd);
    }

    let mut phi_n = vec![0.0; len * k * k];
    let mut phi_s = vec![0.0; len * m * m];
    phi_n[nb * k * k..(nb + 1) * k * k].copy_from_slice(&identity(k));
    phi_s[nb * m * m..(nb + 1) * m * m].copy_from_slice(&identity(m));
    let mut buf_n = vec![0.0; k * k];
    let mut buf_s = vec![0.0; m * m];
    for i in (0..nb).rev() {
        matmul(&n_down[i * k * k..(i + 1) * k * k], &phi_n[(i + 1) * k * k..(i + 2) * k * k], k, k, k, &mut buf_n);
        phi_n[i * k * k..(i + 1) * k * k].copy_from_slice(&buf_n);
        matmul(&s_down[i * m * m..(i + 1) * m * m], &phi_s[(i + 1) * m * m..(i + 2) * m * m], m, m, m, &mut buf_s);
        phi_s[i * m * m..(i + 1) * m * m].copy_from_slice(&buf_s);
    }
    for i in nb + 1..len {
        matmul(&n_up[(i - 1) * k * k..i * k * k], &phi_n[(i - 1) * k * k..i * k * k], k, k, k, &mut buf_n);
        phi_n[i * k * k..(i + 1) * k * k].copy_from_slice(&buf_n);
        matmul(&s_up[(i - 1) * m * m..i * m * m], &phi_s[(i - 1) * m * m..i * m * m], m, m, m, &mut buf_s);
        phi_s[i * m * m..(i + 1) * m * m].copy_from_slice(&buf_s);
    }

    let fb = FundamentalBlocks {
        tau,
        h,
        n: spec.n,
        k,
        i_tau: nb,
        len,
        phi_n,
        phi_s,
        n_down,
        n_up,
        s_up,
        s_down,
    };
    fb.check_conditioning()?;
    Ok(fb)
}

/// Integrates over `[τ − T_window − T_norm, τ + T_window + T_norm]`, enough for every
/// norm evaluation the solvers make on their windows.
pub fn integrate_fundamental(
    spec: &ProblemSpec,
    tau: f64,
    grid: &GridConfig,
    ex: Exponents,
) -> Result<FundamentalBlocks> {
    let span = grid.t_window + grid.t_norm_for(ex);
    integrate_fundamental_span(spec, tau, span, span, grid.h)
}

impl FundamentalBlocks {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tau_index(&self) -> usize {
        self.i_tau
    }

    pub fn time(&self, i: usize) -> f64 {
        self.tau + (i as f64 - self.i_tau as f64) * self.h
    }

    pub fn span(&self) -> (f64, f64) {
        (self.time(0), self.time(self.len - 1))
    }

    /// Node index of `t` if `t` lies on the grid.
    pub fn node(&self, t: f64) -> Option<usize> {
        let x = (t - self.tau) / self.h + self.i_tau as f64;
        let r = x.round();
        ((x - r).abs() <= 1e-6 && r >= 0.0 && r < self.len as f64).then_some(r as usize)
    }

    pub fn dim(&self, b: Block) -> usize {
        match b {
            Block::N => self.k,
            Block::S => self.n - self.k,
        }
    }

    pub fn phi(&self, b: Block, i: usize) -> &[f64] {
        let d = self.dim(b);
        match b {
            Block::N => &self.phi_n[i * d * d..(i + 1) * d * d],
            Block::S => &self.phi_s[i * d * d..(i + 1) * d * d],
        }
    }

    /// `L_N(t_i, t_{i+1})`.
    pub fn n_step_down(&self, i: usize) -> &[f64] {
        let d = self.k;
        &self.n_down[i * d * d..(i + 1) * d * d]
    }

    /// `L_S(t_{i+1}, t_i)`.
    pub fn s_step_up(&self, i: usize) -> &[f64] {
        let d = self.n - self.k;
        &self.s_up[i * d * d..(i + 1) * d * d]
    }

    /// `L_N(t_{i+1}, t_i)`.
    pub fn n_step_up(&self, i: usize) -> &[f64] {
        let d = self.k;
        &self.n_up[i * d * d..(i + 1) * d * d]
    }

    /// `L_S(t_i, t_{i+1})`.
    pub fn s_step_down(&self, i: usize) -> &[f64] {
        let d = self.n - self.k;
        &self.s_down[i * d * d..(i + 1) * d * d]
    }

    fn check_conditioning(&self) -> Result<()> {
        for b in [Block::N, Block::S] {
            let d = self.dim(b);
            if d == 1 {
                continue;
            }
            for i in 0..self.len {
                let m = self.phi(b, i);
                let cond = match invert(m, d) {
                    Some(inv) => max_op(m, d) * max_op(&inv, d),
                    None => f64::INFINITY,
                };
                if !(cond <= MAX_CONDITION) {
                    return Err(Error::IllConditioned {
                        block: if b == Block::N { "N" } else { "S" },
                        t: self.time(i),
                        cond,
                    });
                }
            }
        }
        Ok(())
    }

    fn interpolated(&self, b: Block, t: f64) -> Result<Vec<f64>> {
        let (lo, hi) = self.span();
        if t < lo - 1e-9 * self.h || t > hi + 1e-9 * self.h {
            return Err(Error::OutOfWindow { t, lo, hi });
        }
        let x = ((t - self.tau) / self.h + self.i_tau as f64).clamp(0.0, (self.len - 1) as f64);
        let i = (x.floor() as usize).min(self.len - 1);
        let w = x - i as f64;
        let a = self.phi(b, i);
        if w <= 1e-12 || i + 1 >= self.len {
            return Ok(a.to_vec());
        }
        let c = self.phi(b, i + 1);
        Ok(a.iter().zip(c).map(|(p, q)| (1.0 - w) * p + w * q).collect())
    }

    /// `L(t,s)x = Φ(t)Φ(s)^{-1}x` on one block, interpolating Φ between nodes.
    pub fn apply_block(&self, b: Block, t: f64, s: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim(b);
        let pt = self.interpolated(b, t)?;
        let ps = self.interpolated(b, s)?;
        let y = if d == 1 {
            vec![x[0] / ps[0]]
        } else {
            let lu = DMatrix::from_row_slice(d, d, &ps).lu();
            let sol = lu
                .solve(&nalgebra::DVector::from_column_slice(x))
                .ok_or(Error::IllConditioned {
                    block: if b == Block::N { "N" } else { "S" },
                    t: s,
                    cond: f64::INFINITY,
                })?;
            sol.as_slice().to_vec()
        };
        let mut out = vec![0.0; d];
        matvec(&pt, &y, &mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Part {
    N,
    S,
    Full,
}

/// `L(t,s)x` restricted to `part`. For `Part::N` and `Part::S`, `x` lives in the block.
pub fn apply_l(fb: &FundamentalBlocks, t: f64, s: f64, x: &[f64], part: Part) -> Result<Vec<f64>> {
    match part {
        Part::N => fb.apply_block(Block::N, t, s, x),
        Part::S => fb.apply_block(Block::S, t, s, x),
        Part::Full => {
            let mut y = fb.apply_block(Block::N, t, s, &x[..fb.k])?;
            y.extend(fb.apply_block(Block::S, t, s, &x[fb.k..])?);
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidencePoint {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingCertificate {
    pub gamma: f64,
    pub rho: f64,
    pub m: f64,
    /// `e^{γ(t−τ)}‖L(t,τ)(I−Q)‖` for `t ≥ τ`.
    pub evidence_s: Vec<EvidencePoint>,
    /// `e^{ρ(t−τ)}‖L(t,τ)Q‖` for `t ≤ τ`.
    pub evidence_n: Vec<EvidencePoint>,
    /// M is a maximum over a finite window only.
    pub window_truncated: bool,
}

fn plateau(which: &'static str, values: &[f64]) -> Result<()> {
    if values.len() < 8 {
        return Ok(());
    }
    let cut = values.len() * 3 / 4;
    let early = values[..cut].iter().cloned().fold(0.0, f64::max);
    let late = values[cut..].iter().cloned().fold(0.0, f64::max);
    if late > early * 1.01 {
        return Err(Error::NotSplit { which, early, late });
    }
    Ok(())
}

/// Measures the splitting bound `M` for the exponents `(γ, ρ)` over the integrated window.
pub fn certify_splitting(
    fb: &FundamentalBlocks,
    ambient: AmbientNorm,
    gamma: f64,
    rho: f64,
) -> Result<SplittingCertificate> {
    if !(gamma > rho) {
        return Err(Error::InvalidSpec(format!(
            "need gamma > rho, got gamma = {gamma}, rho = {rho}"
        )));
    }
    let to_mat = |b: Block, i: usize| {
        let d = fb.dim(b);
        DMatrix::from_row_slice(d, d, fb.phi(b, i))
    };
    let it = fb.tau_index();
    let evidence_s: Vec<EvidencePoint> = (it..fb.len())
        .map(|i| {
            let t = fb.time(i);
            EvidencePoint {
                t,
                value: (gamma * (t - fb.tau)).exp() * ambient.op_norm(&to_mat(Block::S, i)),
            }
        })
        .collect();
    let evidence_n: Vec<EvidencePoint> = (0..=it)
        .rev()
        .map(|i| {
            let t = fb.time(i);
            EvidencePoint {
                t,
                value: (rho * (t - fb.tau)).exp() * ambient.op_norm(&to_mat(Block::N, i)),
            }
        })
        .collect();
    let vs: Vec<f64> = evidence_s.iter().map(|e| e.value).collect();
    let vn: Vec<f64> = evidence_n.iter().map(|e| e.value).collect();
    plateau("S", &vs)?;
    plateau("N", &vn)?;
    let m = vs.iter().chain(&vn).cloned().fold(1.0, f64::max);
    Ok(SplittingCertificate {
        gamma,
        rho,
        m,
        evidence_s,
        evidence_n,
        window_truncated: true,
    })
}

/// Exponents declared by the problem, or estimated from the linear part when absent.
/// Constant blocks use the real parts of their eigenvalues; time-dependent blocks use
/// average growth rates over `[τ − T, τ + T]`, rounded to six decimals.
pub fn resolve_exponents(spec: &ProblemSpec, tau: f64, grid: &GridConfig) -> Result<(Exponents, bool)> {
    if let Some(ex) = spec.exponents {
        return Ok((ex, false));
    }
    let round6 = |x: f64| (x * 1e6).round() / 1e6;
    let (gamma, rho) = if spec.autonomous_linear_part() {
        let a = spec.a_matrix(0.0)?;
        let k = spec.k;
        let n = spec.n;
        let re = |m: DMatrix<f64>| -> Vec<f64> {
            m.complex_eigenvalues().iter().map(|c| c.re).collect()
        };
        let an = a.view((0, 0), (k, k)).into_owned();
        let as_ = a.view((k, k), (n - k, n - k)).into_owned();
        let min_n = re(an).into_iter().fold(f64::INFINITY, f64::min);
        let max_s = re(as_).into_iter().fold(f64::NEG_INFINITY, f64::max);
        (round6(-max_s), round6(-min_n))
    } else {
        let w = grid.t_window;
        let fb = integrate_fundamental_span(spec, tau, w, w, grid.h)?;
        let last = fb.len() - 1;
        let rate = |b: Block| {
            let d = fb.dim(b) as f64;
            let det = |i: usize| DMatrix::from_row_slice(fb.dim(b), fb.dim(b), fb.phi(b, i)).determinant();
            (det(last).abs().ln() - det(0).abs().ln()) / (2.0 * w * d)
        };
        (round6(-rate(Block::S)), round6(-rate(Block::N)))
    };
    if !(gamma > rho) {
        return Err(Error::InvalidSpec(format!(
            "estimated exponents gamma = {gamma}, rho = {rho} do not separate; declare [splitting]"
        )));
    }
    Ok((Exponents { gamma, rho }, true))
}

/// Value of a truncated supremum norm and where it was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormValue {
    pub value: f64,
    pub argmax_t: f64,
    pub at_boundary: bool,
}

fn sup_norm_generic(
    fb: &FundamentalBlocks,
    ambient: AmbientNorm,
    b: Block,
    i: usize,
    x: &[f64],
    exponent: f64,
    window_nodes: usize,
) -> NormValue {
    let d = x.len();
    let mut y = x.to_vec();
    let mut tmp = vec![0.0; d];
    let mut best = ambient.norm(&y);
    let mut best_j = 0usize;
    let mut interior = best;
    let mut reached = 0usize;
    for j in 1..=window_nodes {
        let (idx, step) = match b {
            Block::N => {
                if j > i {
                    break;
                }
                (i - j, fb.n_step_down(i - j))
            }
            Block::S => {
                if i + j >= fb.len() {
                    break;
                }
                (i + j, fb.s_step_up(i + j - 1))
            }
        };
        matvec(step, &y, &mut tmp);
        std::mem::swap(&mut y, &mut tmp);
        let dt = fb.time(idx) - fb.time(i);
        let v = (exponent * dt).exp() * ambient.norm(&y);
        if j < window_nodes {
            interior = interior.max(v);
        }
        if v > best {
            best = v;
            best_j = j;
        }
        reached = j;
    }
    // A grid maximum can sit on the boundary by O(h²) when the true peak lies between nodes.
    let at_boundary = reached == window_nodes && best_j == window_nodes && best > interior * (1.0 + fb.h * fb.h);
    let argmax = match b {
        Block::N => i - best_j,
        Block::S => i + best_j,
    };
    NormValue {
        value: best,
        argmax_t: fb.time(argmax),
        at_boundary,
    }
}

/// `|x|_{N(t_i)} = sup_{t_i − T_norm ≤ r ≤ t_i} e^{ρ(r−t_i)}‖L(r,t_i)x‖` on the grid.
pub fn n_norm(
    fb: &FundamentalBlocks,
    ambient: AmbientNorm,
    t: f64,
    x: &[f64],
    rho: f64,
    t_norm: f64,
) -> Result<NormValue> {
    let i = node_or_err(fb, t)?;
    let w = (t_norm / fb.h).round() as usize;
    if i < w {
        return Err(Error::OutOfWindow { t: t - t_norm, lo: fb.span().0, hi: fb.span().1 });
    }
    let v = sup_norm_generic(fb, ambient, Block::N, i, x, rho, w);
    if v.at_boundary {
        return Err(Error::TruncationSuspect { t: v.argmax_t });
    }
    Ok(v)
}

/// `|x|_{S(t_i)} = sup_{t_i ≤ r ≤ t_i + T_norm} e^{γ(r−t_i)}‖L(r,t_i)x‖` on the grid.
pub fn s_norm(
    fb: &FundamentalBlocks,
    ambient: AmbientNorm,
    t: f64,
    x: &[f64],
    gamma: f64,
    t_norm: f64,
) -> Result<NormValue> {
    let i = node_or_err(fb, t)?;
    let w = (t_norm / fb.h).round() as usize;
    if i + w >= fb.len() {
        return Err(Error::OutOfWindow { t: t + t_norm, lo: fb.span().0, hi: fb.span().1 });
    }
    let v = sup_norm_generic(fb, ambient, Block::S, i, x, gamma, w);
    if v.at_boundary {
        return Err(Error::TruncationSuspect { t: v.argmax_t });
    }
    Ok(v)
}

/// `‖x‖_t = Γ(|Qx|_{N(t)}, |(I−Q)x|_{S(t)})`.
pub fn moving_norm(
    fb: &FundamentalBlocks,
    ambient: AmbientNorm,
    gnorm: AdmissibleNorm,
    t: f64,
    x: &[f64],
    ex: Exponents,
    t_norm: f64,
) -> Result<f64> {
    let a = n_norm(fb, ambient, t, &x[..fb.k], ex.rho, t_norm)?.value;
    let b = s_norm(fb, ambient, t, &x[fb.k..], ex.gamma, t_norm)?.value;
    Ok(gnorm.eval(a, b))
}

fn node_or_err(fb: &FundamentalBlocks, t: f64) -> Result<usize> {
    fb.node(t).ok_or_else(|| {
        let (lo, hi) = fb.span();
        Error::OutOfWindow { t, lo, hi }
    })
}

/// Sliding maximum of `l` over windows `[i − w, i]` (or `[i, i + w]` when `forward`),
/// returning the value and its index.
fn sliding_max(l: &[f64], w: usize, forward: bool) -> Vec<(f64, usize)> {
    let len = l.len();
    let mut out = vec![(f64::NEG_INFINITY, 0); len];
    let mut dq: VecDeque<usize> = VecDeque::new();
    let order: Box<dyn Iterator<Item = usize>> = if forward {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for i in order {
        while let Some(&back) = dq.back() {
            if l[back] <= l[i] {
                dq.pop_back();
            } else {
                break;
            }
        }
        dq.push_back(i);
        while let Some(&front) = dq.front() {
            if front.abs_diff(i) > w {
                dq.pop_front();
            } else {
                break;
            }
        }
        let f = *dq.front().expect("deque holds the current index");
        out[i] = (l[f], f);
    }
    out
}

/// Per-node norm factors for one-dimensional blocks; higher-dimensional blocks are
/// evaluated on demand by propagation.
#[derive(Debug, Clone)]
struct ScalarFactors {
    factor: Vec<f64>,
    suspects: usize,
}

fn scalar_factors(fb: &FundamentalBlocks, b: Block, exponent: f64, w: usize) -> ScalarFactors {
    let l: Vec<f64> = (0..fb.len())
        .map(|i| exponent * (fb.time(i) - fb.tau) + fb.phi(b, i)[0].abs().ln())
        .collect();
    let forward = b == Block::S;
    let maxes = sliding_max(&l, w, forward);
    let inner = sliding_max(&l, w.saturating_sub(1), forward);
    let slack = (1.0 + fb.h * fb.h).ln();
    let mut suspects = 0;
    let factor = maxes
        .iter()
        .enumerate()
        .map(|(i, &(m, j))| {
            let full = if forward { i + w < fb.len() } else { i >= w };
            if full && j.abs_diff(i) == w && m > inner[i].0 + slack {
                suspects += 1;
            }
            (m - l[i]).exp()
        })
        .collect();
    ScalarFactors { factor, suspects }
}

/// Fundamental blocks at a base time together with the norms used by the solvers.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub fb: FundamentalBlocks,
    pub ex: Exponents,
    pub t_norm: f64,
    pub ambient: AmbientNorm,
    pub gnorm: AdmissibleNorm,
    window_nodes: usize,
    norm_nodes: usize,
    n_factors: Option<ScalarFactors>,
    s_factors: Option<ScalarFactors>,
}

impl Anchor {
    pub fn new(spec: &ProblemSpec, grid: &GridConfig, ex: Exponents, tau: f64) -> Result<Anchor> {
        let fb = integrate_fundamental(spec, tau, grid, ex)?;
        Ok(Anchor::from_blocks(fb, spec, grid, ex))
    }

    pub fn from_blocks(fb: FundamentalBlocks, spec: &ProblemSpec, grid: &GridConfig, ex: Exponents) -> Anchor {
        let t_norm = grid.t_norm_for(ex);
        let norm_nodes = (t_norm / fb.h).round() as usize;
        let window_nodes = ((grid.t_window / fb.h).round() as usize)
            .min(fb.tau_index().saturating_sub(norm_nodes))
            .min((fb.len() - 1 - fb.tau_index()).saturating_sub(norm_nodes));
        let n_factors = (fb.dim(Block::N) == 1).then(|| scalar_factors(&fb, Block::N, ex.rho, norm_nodes));
        let s_factors = (fb.dim(Block::S) == 1).then(|| scalar_factors(&fb, Block::S, ex.gamma, norm_nodes));
        Anchor {
            fb,
            ex,
            t_norm,
            ambient: spec.ambient,
            gnorm: spec.gamma_norm,
            window_nodes,
            norm_nodes,
            n_factors,
            s_factors,
        }
    }

    pub fn tau(&self) -> f64 {
        self.fb.tau
    }

    /// Number of grid steps in the solver window on either side of `τ`.
    pub fn window_nodes(&self) -> usize {
        self.window_nodes
    }

    /// Nodes at which both norms are fully resolved.
    pub fn solver_node_range(&self) -> (usize, usize) {
        let it = self.fb.tau_index();
        (it - self.window_nodes, it + self.window_nodes)
    }

    /// Scalar norm factor `c` with `|x|_{N(t_i)} = c|x|` when the N block is one-dimensional.
    pub fn n_factor(&self, i: usize) -> Option<f64> {
        self.n_factors.as_ref().map(|f| f.factor[i])
    }

    pub fn s_factor(&self, i: usize) -> Option<f64> {
        self.s_factors.as_ref().map(|f| f.factor[i])
    }

    /// Nodes whose norm supremum was still rising at the truncation boundary.
    pub fn truncation_suspects(&self) -> usize {
        self.n_factors.as_ref().map_or(0, |f| f.suspects) + self.s_factors.as_ref().map_or(0, |f| f.suspects)
    }

    pub fn n_norm_at(&self, i: usize, x: &[f64]) -> f64 {
        match &self.n_factors {
            Some(f) => f.factor[i] * x[0].abs(),
            None => sup_norm_generic(&self.fb, self.ambient, Block::N, i, x, self.ex.rho, self.norm_nodes).value,
        }
    }

    pub fn s_norm_at(&self, i: usize, x: &[f64]) -> f64 {
        match &self.s_factors {
            Some(f) => f.factor[i] * x[0].abs(),
            None => sup_norm_generic(&self.fb, self.ambient, Block::S, i, x, self.ex.gamma, self.norm_nodes).value,
        }
    }

    pub fn moving_norm_at(&self, i: usize, x: &[f64]) -> f64 {
        let k = self.fb.k;
        self.gnorm.eval(self.n_norm_at(i, &x[..k]), self.s_norm_at(i, &x[k..]))
    }

    pub fn node(&self, t: f64) -> Option<usize> {
        self.fb.node(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag() -> ProblemSpec {
        systems::constant_diag()
    }

    #[test]
    fn constant_diagonal_flow() {
        let fb = integrate_fundamental_span(&diag(), 0.0, 5.0, 5.0, 0.01).unwrap();
        let i = fb.node(1.0).unwrap();
        assert!((fb.phi(Block::N, i)[0] / 1f64.exp() - 1.0).abs() <= 1e-9);
        assert!((fb.phi(Block::S, i)[0] / (-1f64).exp() - 1.0).abs() <= 1e-9);
        assert!((fb.phi(Block::S, i)[0] - 0.3678794412).abs() <= 1e-10);
        let it = fb.tau_index();
        assert_eq!(fb.phi(Block::N, it), &[1.0]);
        assert_eq!(fb.phi(Block::S, it), &[1.0]);
    }

    #[test]
    fn periodic_diagonal_over_one_period() {
        let spec = systems::periodic_diag();
        let two_pi = 2.0 * std::f64::consts::PI;
        let fb = integrate_fundamental_span(&spec, 0.0, 1.0, 7.0, 0.01).unwrap();
        // t = 2π is not a node; interpolation error is O(h²) so compare the nearest node.
        let i = (two_pi / 0.01).round() as usize + fb.tau_index();
        let t = fb.time(i);
        let exact = (t + 0.5 * (1.0 - t.cos())).exp();
        assert!((fb.phi(Block::N, i)[0] / exact - 1.0).abs() <= 1e-8);
        let l = apply_l(&fb, two_pi, 0.0, &[1.0], Part::N).unwrap()[0];
        assert!((l / two_pi.exp() - 1.0).abs() <= 1e-4);
    }

    #[test]
    fn apply_examples() {
        let fb = integrate_fundamental_span(&diag(), 0.0, 5.0, 5.0, 0.01).unwrap();
        let y = apply_l(&fb, -1.0, 0.0, &[1.0], Part::N).unwrap();
        assert!((y[0] - (-1f64).exp()).abs() <= 1e-9);
        let x = [0.3, -0.7];
        let same = apply_l(&fb, 0.37, 0.37, &x, Part::Full).unwrap();
        assert!((same[0] - x[0]).abs() < 1e-15 && (same[1] - x[1]).abs() < 1e-15);
        assert!(matches!(
            apply_l(&fb, 6.0, 0.0, &x, Part::Full),
            Err(Error::OutOfWindow { .. })
        ));
    }

    #[test]
    fn cocycle_on_random_node_triples() {
        for spec in [systems::periodic_diag(), systems::rotating_decay()] {
            let fb = integrate_fundamental_span(&spec, 0.3, 6.0, 6.0, 0.01).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..200 {
                let mut idx = [0usize; 3];
                for v in idx.iter_mut() {
                    *v = rng.gen_range(0..fb.len());
                }
                idx.sort_unstable();
                let [s, r, t] = idx.map(|i| fb.time(i));
                let x: Vec<f64> = (0..spec.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let direct = apply_l(&fb, t, s, &x, Part::Full).unwrap();
                let via = apply_l(&fb, t, r, &apply_l(&fb, r, s, &x, Part::Full).unwrap(), Part::Full).unwrap();
                let scale = 1.0 + direct.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in direct.iter().zip(&via) {
                    assert!((a - b).abs() <= 1e-8 * scale);
                }
                // intertwining with the projection
                let mut qx = x.clone();
                qx[spec.k..].iter_mut().for_each(|v| *v = 0.0);
                let lq = apply_l(&fb, t, s, &qx, Part::Full).unwrap();
                for j in 0..spec.n {
                    let expect = if j < spec.k { direct[j] } else { 0.0 };
                    assert!((lq[j] - expect).abs() <= 1e-10 * scale);
                }
            }
        }
    }

    #[test]
    fn one_step_maps_agree_with_fundamental_matrices() {
        let spec = systems::rotating_decay();
        let fb = integrate_fundamental_span(&spec, 0.0, 3.0, 3.0, 0.01).unwrap();
        let d = fb.dim(Block::S);
        for i in [0usize, 100, 299, 450] {
            let mut prod = vec![0.0; d * d];
            matmul(fb.s_step_up(i), fb.phi(Block::S, i), d, d, d, &mut prod);
            for (a, b) in prod.iter().zip(fb.phi(Block::S, i + 1)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_diagonal_is_split_with_unit_bound() {
        let fb = integrate_fundamental_span(&diag(), 0.0, 60.0, 60.0, 0.01).unwrap();
        let cert = certify_splitting(&fb, AmbientNorm::Max, 1.0, -1.0).unwrap();
        assert!((cert.m - 1.0).abs() <= 1e-9, "M = {}", cert.m);
        assert!(cert.window_truncated);
        for e in cert.evidence_s.iter().chain(&cert.evidence_n) {
            assert!(e.value <= cert.m * (1.0 + 1e-9));
        }
    }

    #[test]
    fn periodic_diagonal_bound_is_e() {
        let spec = systems::periodic_diag();
        let fb = integrate_fundamental_span(&spec, 0.0, 30.0, 30.0, 0.01).unwrap();
        let cert = certify_splitting(&fb, AmbientNorm::Max, 1.0, -1.0).unwrap();
        assert!((cert.m - 1f64.exp()).abs() <= 1e-6, "M = {}", cert.m);
    }

    #[test]
    fn too_fast_decay_is_not_split() {
        let fb = integrate_fundamental_span(&diag(), 0.0, 20.0, 20.0, 0.01).unwrap();
        assert!(matches!(
            certify_splitting(&fb, AmbientNorm::Max, 1.5, -1.0),
            Err(Error::NotSplit { which: "S", .. })
        ));
        assert!(matches!(
            certify_splitting(&fb, AmbientNorm::Max, -1.0, 1.0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn exponents_are_estimated_for_constant_blocks() {
        let mut spec = systems::rotgap(0.6);
        spec.exponents = None;
        let (ex, estimated) = resolve_exponents(&spec, 0.0, &GridConfig::default()).unwrap();
        assert!(estimated);
        assert_eq!(ex, Exponents { gamma: 1.0, rho: -1.0 });
        let (ex, estimated) =
            resolve_exponents(&systems::periodic_forced(), 0.0, &GridConfig::default()).unwrap();
        assert!(!estimated);
        assert_eq!(ex, Exponents { gamma: 1.0, rho: -1.0 });
    }

    #[test]
    fn n_norm_examples() {
        let fb = integrate_fundamental_span(&diag(), 0.0, 20.0, 20.0, 0.01).unwrap();
        let v = n_norm(&fb, AmbientNorm::Max, 0.0, &[2.0], -1.0, 15.0).unwrap();
        assert!((v.value - 2.0).abs() <= 1e-10);
        assert_eq!(n_norm(&fb, AmbientNorm::Max, 0.0, &[0.0], -1.0, 15.0).unwrap().value, 0.0);
        let m = moving_norm(
            &fb,
            AmbientNorm::Max,
            AdmissibleNorm::Max,
            0.0,
            &[2.0, 3.0],
            Exponents { gamma: 1.0, rho: -1.0 },
            15.0,
        )
        .unwrap();
        assert!((m - 3.0).abs() <= 1e-10);
    }

    #[test]
    fn growing_weight_is_flagged_at_the_boundary() {
        let fb = integrate_fundamental_span(&diag(), 0.0, 20.0, 20.0, 0.01).unwrap();
        // ρ = −1.5 leaves e^{−0.5(t−τ)} growth backward, so the supremum sits on the edge.
        assert!(matches!(
            n_norm(&fb, AmbientNorm::Max, 0.0, &[1.0], -1.5, 10.0),
            Err(Error::TruncationSuspect { .. })
        ));
    }

    #[test]
    fn scalar_factors_match_generic_sup() {
        let spec = systems::periodic_diag();
        let grid = GridConfig { t_window: 10.0, t_norm: Some(8.0), ..GridConfig::default() };
        let ex = Exponents { gamma: 1.0, rho: -1.0 };
        let anchor = Anchor::new(&spec, &grid, ex, 0.5).unwrap();
        let (lo, hi) = anchor.solver_node_range();
        for i in (lo..=hi).step_by(97) {
            let g = sup_norm_generic(&anchor.fb, AmbientNorm::Max, Block::N, i, &[1.0], ex.rho, 800);
            assert!((g.value / anchor.n_factor(i).unwrap() - 1.0).abs() < 1e-10);
            let g = sup_norm_generic(&anchor.fb, AmbientNorm::Max, Block::S, i, &[1.0], ex.gamma, 800);
            assert!((g.value / anchor.s_factor(i).unwrap() - 1.0).abs() < 1e-10);
            // exact factors of the diagonal flow
            let t = anchor.fb.time(i);
            let cs = (0.5 * (1.0 - t.sin())).exp();
            let cn = (0.5 * (t.cos() + 1.0)).exp();
            assert!((anchor.s_factor(i).unwrap() / cs - 1.0).abs() < 1e-3);
            assert!((anchor.n_factor(i).unwrap() / cn - 1.0).abs() < 1e-3);
        }
        assert_eq!(anchor.truncation_suspects(), 0);
    }

    #[test]
    fn renormed_contraction() {
        let spec = systems::periodic_diag();
        let grid = GridConfig { t_window: 10.0, t_norm: Some(8.0), ..GridConfig::default() };
        let ex = Exponents { gamma: 1.0, rho: -1.0 };
        let anchor = Anchor::new(&spec, &grid, ex, 0.0).unwrap();
        let fb = &anchor.fb;
        let it = fb.tau_index();
        let (lo, hi) = anchor.solver_node_range();
        let base_n = anchor.n_norm_at(it, &[1.0]);
        let base_s = anchor.s_norm_at(it, &[1.0]);
        for i in (lo..=hi).step_by(37) {
            let t = fb.time(i);
            if i <= it {
                let y = fb.phi(Block::N, i)[0];
                assert!((ex.rho * t).exp() * anchor.n_norm_at(i, &[y]) <= base_n + 1e-8);
            } else {
                let y = fb.phi(Block::S, i)[0];
                assert!((ex.gamma * t).exp() * anchor.s_norm_at(i, &[y]) <= base_s + 1e-8);
            }
        }
    }

    #[test]
    fn multidimensional_block_norms() {
        let spec = systems::rotating_decay();
        let grid = GridConfig { t_window: 6.0, t_norm: Some(5.0), ..GridConfig::default() };
        let ex = Exponents { gamma: 1.0, rho: -1.0 };
        let anchor = Anchor::new(&spec, &grid, ex, 0.0).unwrap();
        let it = anchor.fb.tau_index();
        // the S block is a decaying rotation, isometric in the euclidean norm after weighting
        let v = anchor.s_norm_at(it, &[0.6, -0.8]);
        assert!((v - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn norms_are_sandwiched_by_the_splitting_bound(
            x in proptest::collection::vec(-5.0f64..5.0, 2),
            node in 0usize..600,
        ) {
            let spec = systems::periodic_diag();
            let grid = GridConfig { t_window: 3.0, t_norm: Some(7.0), ..GridConfig::default() };
            let ex = Exponents { gamma: 1.0, rho: -1.0 };
            let anchor = anchor_cache(&spec, &grid, ex);
            let (lo, _) = anchor.solver_node_range();
            let i = lo + node;
            let m = 1f64.exp();
            let nn = anchor.n_norm_at(i, &x[..1]);
            let sn = anchor.s_norm_at(i, &x[1..]);
            prop_assert!(x[0].abs() <= nn * (1.0 + 1e-12) && nn <= m * x[0].abs() * (1.0 + 1e-6));
            prop_assert!(x[1].abs() <= sn * (1.0 + 1e-12) && sn <= m * x[1].abs() * (1.0 + 1e-6));
            let g = anchor.gnorm;
            let mv = anchor.moving_norm_at(i, &x);
            let amb = AmbientNorm::Max.norm(&x);
            prop_assert!(amb / g.c_gamma() <= mv * (1.0 + 1e-12));
            prop_assert!(mv <= m * g.eval(1.0, 1.0) * amb * (1.0 + 1e-6));
        }
    }

    fn anchor_cache(spec: &ProblemSpec, grid: &GridConfig, ex: Exponents) -> &'static Anchor {
        use std::sync::OnceLock;
        static CACHE: OnceLock<Anchor> = OnceLock::new();
        CACHE.get_or_init(|| Anchor::new(spec, grid, ex, 0.0).unwrap())
    }
}

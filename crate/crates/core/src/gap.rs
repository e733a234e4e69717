//! Scalar constants of the gap condition: the contraction exponent `σ*` and factor `θ*`,
//! the cone constant `κ`, the refined Lipschitz constants `κ_Σ` and `κ_Θ`, and the
//! attraction exponent `ω`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::AdmissibleNorm;

const BRACKET_POINTS: usize = 256;
const KAPPA_STEP_TOL: f64 = 1e-13;
const KAPPA_MAX_STEPS: usize = 10_000;
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapCertificate {
    pub gamma: f64,
    pub rho: f64,
    pub l1: f64,
    pub l2: f64,
    pub gamma_norm: AdmissibleNorm,
    pub sigma_star: f64,
    pub theta_star: f64,
    /// `None` when `L₁ = 0`.
    pub kappa: Option<f64>,
    pub kappa_sigma: f64,
    pub kappa_theta: f64,
    pub omega: f64,
    pub inertial: bool,
}

impl GapCertificate {
    pub fn compute(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm) -> Result<GapCertificate> {
        let (sigma_star, theta_star) = find_sigma(gamma, rho, l1, l2, g)?;
        let kappa = kappa_at(gamma, rho, l1, l2, sigma_star);
        let kappa_sigma = refine_kappa_sigma(gamma, rho, l1, l2, g)?;
        let kappa_theta = refine_kappa_theta(gamma, rho, l1, l2, g)?;
        let omega = omega_rate(gamma, rho, l1, l2, kappa_sigma, g);
        Ok(GapCertificate {
            gamma,
            rho,
            l1,
            l2,
            gamma_norm: g,
            sigma_star,
            theta_star,
            kappa,
            kappa_sigma,
            kappa_theta,
            omega,
            inertial: omega > 0.0,
        })
    }

    /// The cone constant used for sign checks: `κ(σ*)`, or `κ_Σ` when `κ` is infinite.
    pub fn cone_kappa(&self) -> f64 {
        self.kappa.unwrap_or(self.kappa_sigma)
    }

    /// Rate in the backward growth bound `‖z(t)‖_t ≤ c e^{−(ρ + L₁Γ(1,κ_Σ))(t−τ)}‖η‖_τ`.
    pub fn backward_rate(&self) -> f64 {
        self.rho + self.l1 * self.gamma_norm.eval(1.0, self.kappa_sigma)
    }

    pub fn backward_factor(&self) -> f64 {
        self.gamma_norm.eval(1.0, self.kappa_sigma) / self.gamma_norm.eval(1.0, 0.0)
    }

    /// Rate in the stable decay bound `‖T(t,τ)P_Θη‖_t ≤ c e^{−(γ − L₂Γ(κ_Θ,1))(t−τ)}‖P_Θη‖_τ`.
    pub fn stable_rate(&self) -> f64 {
        self.gamma - self.l2 * self.gamma_norm.eval(self.kappa_theta, 1.0)
    }

    pub fn stable_factor(&self) -> f64 {
        self.gamma_norm.eval(self.kappa_theta, 1.0) / self.gamma_norm.eval(0.0, 1.0)
    }
}

/// `θ(σ) = Γ(L₁/(σ−ρ), L₂/(γ−σ))`.
pub fn theta(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm, sigma: f64) -> f64 {
    let a = if l1 == 0.0 { 0.0 } else { l1 / (sigma - rho) };
    g.eval(a, l2 / (gamma - sigma))
}

/// `κ = (L₂/L₁)(σ−ρ)/(γ−σ)`, or `None` when `L₁ = 0`.
pub fn kappa_at(gamma: f64, rho: f64, l1: f64, l2: f64, sigma: f64) -> Option<f64> {
    (l1 > 0.0).then(|| l2 / l1 * (sigma - rho) / (gamma - sigma))
}

fn check_inputs(gamma: f64, rho: f64, l1: f64, l2: f64) -> Result<()> {
    if !(gamma > rho) || !(l1 >= 0.0) || !(l2 > 0.0) || !gamma.is_finite() || !rho.is_finite() {
        return Err(Error::InvalidSpec(format!(
            "need gamma > rho, L1 >= 0, L2 > 0; got gamma = {gamma}, rho = {rho}, L1 = {l1}, L2 = {l2}"
        )));
    }
    Ok(())
}

/// Minimises `θ(σ)` over `(ρ, γ)`: bracketing on a 256-point interior grid, then
/// golden-section refinement between the neighbours of the best grid point.
pub fn find_sigma(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm) -> Result<(f64, f64)> {
    check_inputs(gamma, rho, l1, l2)?;
    let th = |s: f64| theta(gamma, rho, l1, l2, g, s);
    let step = (gamma - rho) / (BRACKET_POINTS + 1) as f64;
    let grid = |j: usize| rho + j as f64 * step;
    let best = (1..=BRACKET_POINTS)
        .min_by(|&a, &b| th(grid(a)).total_cmp(&th(grid(b))))
        .expect("nonempty bracket");
    let mut a = grid(best.saturating_sub(1).max(1));
    let mut b = grid((best + 1).min(BRACKET_POINTS));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (th(c), th(d));
    while b - a > 1e-14 * (gamma - rho) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = th(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = th(d);
        }
    }
    let mut sigma = 0.5 * (a + b);
    let mut value = th(sigma);
    if th(grid(best)) < value {
        sigma = grid(best);
        value = th(sigma);
    }
    if value >= 1.0 - 1e-12 {
        return Err(Error::GapFails { theta: value });
    }
    Ok((sigma, value))
}

fn iterate_kappa(
    what: &'static str,
    seed: f64,
    step: impl Fn(f64) -> Option<f64>,
    limit: Option<f64>,
) -> Result<f64> {
    let mut k = seed;
    for _ in 0..KAPPA_MAX_STEPS {
        let next = step(k).ok_or(Error::NoConvergence { what })?;
        if !(next >= 0.0) || !next.is_finite() || limit.is_some_and(|l| next > l * (1.0 + 1e-12)) {
            return Err(Error::NoConvergence { what });
        }
        if (next - k).abs() <= KAPPA_STEP_TOL {
            return Ok(next);
        }
        k = next;
    }
    Err(Error::NoConvergence { what })
}

/// Iteration map `g(κ) = L₂Γ(1,κ)/(γ−ρ−L₁Γ(1,κ))` whose smallest fixed point is `κ_Σ`.
pub fn kappa_sigma_map(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm, k: f64) -> Option<f64> {
    let gk = g.eval(1.0, k);
    let denom = gamma - rho - l1 * gk;
    (denom > 0.0).then(|| l2 * gk / denom)
}

/// Iteration map whose smallest fixed point is `κ_Θ`.
pub fn kappa_theta_map(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm, k: f64) -> Option<f64> {
    let gk = g.eval(k, 1.0);
    let denom = gamma - rho - l2 * gk;
    (denom > 0.0).then(|| l1 * gk / denom)
}

/// `κ_Σ` seeded from an arbitrary point of `[0, κ)`.
pub fn refine_kappa_sigma_from(
    gamma: f64,
    rho: f64,
    l1: f64,
    l2: f64,
    g: AdmissibleNorm,
    seed: f64,
) -> Result<f64> {
    check_inputs(gamma, rho, l1, l2)?;
    let what = "kappa_sigma";
    let limit = find_sigma(gamma, rho, l1, l2, g)
        .ok()
        .and_then(|(s, _)| kappa_at(gamma, rho, l1, l2, s));
    let k = iterate_kappa(what, seed, |k| kappa_sigma_map(gamma, rho, l1, l2, g, k), limit)?;
    let residual = if k > 0.0 {
        gamma - rho - l1 * g.eval(1.0, k) - l2 * g.eval(1.0 / k, 1.0)
    } else {
        l2
    };
    if residual.abs() > RESIDUAL_TOL {
        return Err(Error::NoConvergence { what });
    }
    Ok(k)
}

/// Smallest solution of `γ−ρ = L₁Γ(1,κ) + L₂Γ(1/κ,1)`, iterated from 0.
pub fn refine_kappa_sigma(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm) -> Result<f64> {
    refine_kappa_sigma_from(gamma, rho, l1, l2, g, 0.0)
}

/// Smallest solution of `γ−ρ = L₁Γ(1,1/κ) + L₂Γ(κ,1)`, iterated from 0. The residual is
/// evaluated multiplied through by `κ`, which also covers `κ = 0` when `L₁ = 0`.
pub fn refine_kappa_theta(gamma: f64, rho: f64, l1: f64, l2: f64, g: AdmissibleNorm) -> Result<f64> {
    check_inputs(gamma, rho, l1, l2)?;
    let what = "kappa_theta";
    let k = iterate_kappa(what, 0.0, |k| kappa_theta_map(gamma, rho, l1, l2, g, k), None)?;
    let gk = g.eval(k, 1.0);
    let residual = k * (gamma - rho) - l1 * gk - k * l2 * gk;
    if residual.abs() > RESIDUAL_TOL {
        return Err(Error::NoConvergence { what });
    }
    Ok(k)
}

/// `ω = γ − (γ−ρ)L₂Γ(0,1)/(γ−ρ−L₁Γ(1,κ_Σ))`.
pub fn omega_rate(gamma: f64, rho: f64, l1: f64, l2: f64, kappa_sigma: f64, g: AdmissibleNorm) -> f64 {
    let omega =
        gamma - (gamma - rho) * l2 * g.eval(0.0, 1.0) / (gamma - rho - l1 * g.eval(1.0, kappa_sigma));
    debug_assert!(rho < omega && omega < gamma, "omega {omega} outside ({rho}, {gamma})");
    omega
}

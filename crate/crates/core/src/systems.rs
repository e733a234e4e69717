//! Benchmark systems with known manifolds.

use std::collections::BTreeMap;

use crate::problem::{AdmissibleNorm, AmbientNorm, ProblemSpec};

fn build(
    name: &str,
    n: usize,
    k: usize,
    a: &[(usize, usize, &str)],
    f: &[&str],
    l1: f64,
    l2: f64,
) -> ProblemSpec {
    ProblemSpec::from_sources(name, n, k, a, f, l1, l2, BTreeMap::new())
        .expect("benchmark sources are well formed")
}

/// `A = diag(1, −1)`, `f = ε(−u₂, u₁)`. The invariant graph is the unstable eigenline of
/// `[[1, −ε], [ε, −1]]` with slope `(1 − √(1−ε²))/ε`; no invariant graph exists for `ε ≥ 1`.
pub fn rotgap(eps: f64) -> ProblemSpec {
    let f1 = format!("{eps:?}*(-u2)");
    let f2 = format!("{eps:?}*u1");
    build(
        &format!("rotgap({eps})"),
        2,
        1,
        &[(0, 0, "1"), (1, 1, "-1")],
        &[&f1, &f2],
        eps,
        eps,
    )
    .with_exponents(1.0, -1.0)
}

/// `A = diag(1, −1)`, `f = (0, ε tanh u₁)`. The graph is `Σ(q) = ε ln(cosh q)/q`.
pub fn tanhline(eps: f64) -> ProblemSpec {
    let f2 = format!("{eps:?}*tanh(u1)");
    build(
        &format!("tanhline({eps})"),
        2,
        1,
        &[(0, 0, "1"), (1, 1, "-1")],
        &["0", &f2],
        0.0,
        eps,
    )
    .with_exponents(1.0, -1.0)
}

/// `A = diag(1, −1)` with `f ≡ 0` and a nominal `L₂`.
pub fn linear_only() -> ProblemSpec {
    build("linear", 2, 1, &[(0, 0, "1"), (1, 1, "-1")], &["0", "0"], 0.0, 0.1)
        .with_exponents(1.0, -1.0)
}

/// Constant `A = diag(1, −1)` used for splitting certification.
pub fn constant_diag() -> ProblemSpec {
    linear_only()
}

/// `A(t) = diag(1 + 0.5 sin t, −1 + 0.5 cos t)` with `f ≡ 0`.
pub fn periodic_diag() -> ProblemSpec {
    build(
        "periodic-diag",
        2,
        1,
        &[(0, 0, "1+0.5*sin(t)"), (1, 1, "-1+0.5*cos(t)")],
        &["0", "0"],
        0.0,
        0.1,
    )
    .with_exponents(1.0, -1.0)
}

/// Declared `L₂` of [`periodic_forced`]: the supremum over `t` of
/// `0.3 |sin t| c_S(t)/c_N(t)` with `c_S(t) = e^{0.5(1 − sin t)}`, `c_N(t) = e^{0.5(1 + cos t)}`,
/// rounded up.
pub const PERIODIC_FORCED_L2: f64 = 0.54;

/// [`periodic_diag`] with `f = (0, 0.3 sin(t) tanh u₁)`; no closed form.
pub fn periodic_forced() -> ProblemSpec {
    build(
        "periodic-forced",
        2,
        1,
        &[(0, 0, "1+0.5*sin(t)"), (1, 1, "-1+0.5*cos(t)")],
        &["0", "0.3*sin(t)*tanh(u1)"],
        0.0,
        PERIODIC_FORCED_L2,
    )
    .with_exponents(1.0, -1.0)
}

/// Three-dimensional system with a two-dimensional decaying rotation as S block.
pub fn rotating_decay() -> ProblemSpec {
    build(
        "rotating-decay",
        3,
        1,
        &[(0, 0, "1"), (1, 1, "-1"), (1, 2, "2"), (2, 1, "-2"), (2, 2, "-1")],
        &["0", "0.2*tanh(u1)", "0"],
        0.0,
        0.2,
    )
    .with_exponents(1.0, -1.0)
    .with_norms(AmbientNorm::Euclid, AdmissibleNorm::Max)
}

/// Slope of the invariant line of `rotgap(ε)`.
pub fn rotgap_slope(eps: f64) -> f64 {
    (1.0 - (1.0 - eps * eps).sqrt()) / eps
}

/// `Σ(q) = ε ln(cosh q)/q` for `tanhline(ε)`.
pub fn tanhline_sigma(eps: f64, q: f64) -> f64 {
    if q == 0.0 {
        0.0
    } else {
        eps * q.cosh().ln() / q
    }
}

/// `Σ′(q)` for `tanhline(ε)`.
pub fn tanhline_sigma_prime(eps: f64, q: f64) -> f64 {
    if q == 0.0 {
        eps / 2.0
    } else {
        eps * (q * q.tanh() - q.cosh().ln()) / (q * q)
    }
}

//! Acceptance criteria; prints one PASS/FAIL line per criterion.

use std::process::Command;
use std::time::Instant;

use lpm_core::gap::{omega_rate, refine_kappa_sigma, GapCertificate};
use lpm_core::linear::{certify_splitting, Anchor};
use lpm_core::problem::{AdmissibleNorm, Exponents, GridConfig};
use lpm_core::solver::ManifoldSolver;
use lpm_core::systems;
use lpm_core::verify::{check_c1, check_derivative_fd, verify_problem, BatteryInputs};
use lpm_core::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn solver(spec: lpm_core::problem::ProblemSpec) -> Result<ManifoldSolver, String> {
    ManifoldSolver::new(spec, GridConfig::default()).map_err(|e| e.to_string())
}

fn sharp_gap() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut slowest: f64 = 0.0;
    for eps in [0.2, 0.5, 0.6, 0.9] {
        let s = solver(systems::rotgap(eps))?;
        let start = Instant::now();
        let (_, sol) = s.sigma_at(0.0, &[1.0]).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let err = (sol.sigma[0] - systems::rotgap_slope(eps)).abs();
        let tol = if eps <= 0.6 { 1e-4 } else { 1e-3 };
        ensure(err <= tol, format!("eps={eps}: slope error {err:.3e} > {tol:e}"))?;
        ensure(secs < 5.0, format!("eps={eps}: solve took {secs:.2} s"))?;
        worst = worst.max(err);
        slowest = slowest.max(secs);
    }
    match ManifoldSolver::new(systems::rotgap(1.0), GridConfig::default()) {
        Err(Error::GapFails { .. }) => {}
        other => return Err(format!("rotgap(1.0) gave {:?}", other.map(|s| s.gap))),
    }
    Ok(format!("max slope error {worst:.2e}, slowest solve {slowest:.2} s, rotgap(1.0) GapFails"))
}

fn closed_forms() -> Outcome {
    let max = AdmissibleNorm::Max;
    let sum = AdmissibleNorm::sum();
    let e = |x: Result<f64, Error>| x.map_err(|e| e.to_string());
    let mut worst: f64 = 0.0;
    let mut cmp = |what: &str, got: f64, want: f64| -> Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        ensure(d <= 1e-12, format!("{what}: {got} vs {want}"))
    };
    cmp("kappa_sigma max", e(refine_kappa_sigma(2.0, -2.0, 1.0, 1.0, max))?, 1.0 / (2.0 + 2.0 - 1.0))?;
    cmp("kappa_sigma rotgap", e(refine_kappa_sigma(1.0, -1.0, 0.6, 0.6, max))?, 0.6 / (2.0 - 0.6))?;
    let ks1 = e(refine_kappa_sigma(3.0, -2.0, 1.0, 1.0, sum))?;
    cmp("kappa_sigma sum", ks1, 2.0 / (3.0 + 5f64.sqrt()))?;
    cmp("omega max", omega_rate(2.0, -2.0, 1.0, 1.0, 1.0 / 3.0, max), 2.0 / 3.0)?;
    let g = GapCertificate::compute(1.0, -1.0, 0.6, 0.6, max).map_err(|e| e.to_string())?;
    cmp("omega rotgap", g.omega, 1.0 / 7.0)?;
    cmp("omega sum", omega_rate(3.0, -2.0, 1.0, 1.0, ks1, sum), (1.0 + 5f64.sqrt()) / 2.0)?;
    ensure((ks1 - 0.3819660113).abs() < 1e-10, format!("kappa_sigma sum {ks1}"))?;
    Ok(format!("largest deviation {worst:.1e}"))
}

fn analytic_graph() -> Outcome {
    let s = solver(systems::tanhline(0.5))?;
    let anchor = s.anchor(0.0).map_err(|e| e.to_string())?;
    let chart = s.sample_chart(&anchor, &[vec![0.5], vec![1.0], vec![2.0]]);
    let mut worst: f64 = 0.0;
    for p in &chart.points {
        let sigma = p.sigma.as_ref().ok_or_else(|| format!("q={:?}: {:?}", p.q, p.error))?;
        let d = (sigma[0] - systems::tanhline_sigma(0.5, p.q[0])).abs();
        ensure(d <= 1e-4, format!("q={}: error {d:.3e}", p.q[0]))?;
        worst = worst.max(d);
    }
    ensure(chart.is_consistent(), "chart invariants violated".into())?;
    let base = s.solve_unstable(&anchor, &[1.0, 0.0]).map_err(|e| e.to_string())?;
    let d = s.solve_derivative(&anchor, &base).map_err(|e| e.to_string())?;
    let derr = (d.dsigma[0][0] - systems::tanhline_sigma_prime(0.5, 1.0)).abs();
    ensure(derr <= 1e-4, format!("sigma'(1) error {derr:.3e}"))?;
    Ok(format!("chart error {worst:.2e}, derivative error {derr:.2e}"))
}

fn contraction_certificate() -> Outcome {
    let mut solves = 0;
    let mut worst_ratio_margin = f64::INFINITY;
    let mut worst_domination = f64::INFINITY;
    let mut cases: Vec<(ManifoldSolver, f64, f64)> = Vec::new();
    for eps in [0.2, 0.5, 0.6, 0.9] {
        cases.push((solver(systems::rotgap(eps))?, 1.0, systems::rotgap_slope(eps)));
        cases.push((solver(systems::rotgap(eps))?, -2.0, -2.0 * systems::rotgap_slope(eps)));
    }
    for q in [0.5, 1.0, 2.0] {
        cases.push((solver(systems::tanhline(0.5))?, q, systems::tanhline_sigma(0.5, q)));
    }
    for (s, q, oracle) in &cases {
        let (_, sol) = s.sigma_at(0.0, &[*q]).map_err(|e| e.to_string())?;
        let d = &sol.diagnostics;
        let limit = s.gap.theta_star + 0.05;
        ensure(d.max_ratio() <= limit, format!("{} q={q}: ratio {} > {limit}", s.spec.name, d.max_ratio()))?;
        let err = (sol.sigma[0] - oracle).abs();
        let bound = d.error_bound();
        ensure(err <= bound, format!("{} q={q}: error {err:.3e} exceeds bound {bound:.3e}", s.spec.name))?;
        let floor = d.tail_bound + d.discretization_error.unwrap_or(0.0);
        ensure(
            (err - floor).max(0.0) <= d.apost_error,
            format!("{} q={q}: a-posteriori {:.3e} below iterate error", s.spec.name, d.apost_error),
        )?;
        worst_ratio_margin = worst_ratio_margin.min(limit - d.max_ratio());
        worst_domination = worst_domination.min(bound - err);
        solves += 1;
    }
    Ok(format!(
        "{solves} solves, min ratio margin {worst_ratio_margin:.3}, min bound slack {worst_domination:.2e}"
    ))
}

fn theorem_inequalities() -> Outcome {
    let wanted = ["invariance", "attraction", "lipschitz", "backward_growth", "stable_decay", "cone_backward", "cone_forward"];
    let mut total = 0;
    for (spec, attraction, stable) in [
        (systems::rotgap(0.6), vec![0.0, 1.0], vec![0.0, 1.0]),
        (systems::tanhline(0.5), vec![1.0, 1.0], vec![3.0, 1.0]),
        (systems::periodic_forced(), vec![1.0, 1.0], vec![3.0, 1.0]),
    ] {
        let s = solver(spec)?;
        let mut inputs = BatteryInputs::defaults(2, 1, 0.0);
        inputs.attraction_eta = attraction;
        inputs.stable_eta = stable;
        let reports = verify_problem(&s, &inputs);
        for name in wanted {
            let r = reports
                .iter()
                .find(|r| r.check == name)
                .ok_or_else(|| format!("{}: {name} missing", s.spec.name))?;
            ensure(r.pass && r.violations == 0, r.summary())?;
            total += r.samples;
        }
    }
    Ok(format!("7 inequalities on 3 systems, {total} samples, 0 violations"))
}

fn derivative_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for spec in [systems::rotgap(0.6), systems::tanhline(0.5)] {
        let s = solver(spec)?;
        let r = check_derivative_fd(&s, 0.0, &[1.0, 0.0], 1e-4).map_err(|e| e.to_string())?;
        ensure(r.pass && r.measured <= 1e-4, r.summary())?;
        worst = worst.max(r.measured);
    }
    let s = solver(systems::tanhline(0.5))?;
    let hs = [0.5, 0.25, 0.1, 0.05];
    let r = check_c1(&s, 0.0, &[1.0, 0.0], &hs).map_err(|e| e.to_string())?;
    let d: Vec<f64> = hs.iter().map(|h| r.details[&format!("d({h})")]).collect();
    for (w, h) in d.windows(2).zip(hs.windows(2)) {
        ensure(w[1] <= w[0], format!("d({}) = {:.3e} > d({}) = {:.3e}", h[1], w[1], h[0], w[0]))?;
    }
    let fine = check_c1(&s, 0.0, &[1.0, 0.0], &[0.5, 0.25, 0.1, 0.05, 0.01, 0.005]).map_err(|e| e.to_string())?;
    ensure(fine.pass, fine.summary())?;
    Ok(format!(
        "finite-difference deviation {worst:.2e}, d(h) = {:.2e} .. {:.2e} non-increasing, d(0.005) = {:.2e}",
        d[0], d[3], fine.measured
    ))
}

fn splitting_certification() -> Outcome {
    let grid = GridConfig::default();
    let ex = Exponents { gamma: 1.0, rho: -1.0 };
    let m_of = |spec: &lpm_core::problem::ProblemSpec, gamma: f64| -> Result<f64, Error> {
        let a = Anchor::new(spec, &grid, ex, 0.0)?;
        certify_splitting(&a.fb, spec.ambient, gamma, -1.0).map(|c| c.m)
    };
    let m1 = m_of(&systems::constant_diag(), 1.0).map_err(|e| e.to_string())?;
    ensure((m1 - 1.0).abs() <= 1e-9, format!("constant M = {m1}"))?;
    let me = m_of(&systems::periodic_diag(), 1.0).map_err(|e| e.to_string())?;
    ensure((me - std::f64::consts::E).abs() <= 1e-6, format!("periodic M = {me}"))?;
    match m_of(&systems::constant_diag(), 1.5) {
        Err(Error::NotSplit { .. }) => {}
        other => return Err(format!("gamma=1.5 gave {other:?}")),
    }
    Ok(format!("M = 1 + {:.1e}, M = e + {:.1e}, gamma=1.5 NotSplit", m1 - 1.0, me - std::f64::consts::E))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bodies = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_lpm"))
            .args(["bench", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.code() == Some(0), format!("bench exit {:?}", status.status.code()))?;
        bodies.push(std::fs::read(out.join("report.canonical.json")).map_err(|e| e.to_string())?);
    }
    ensure(bodies[0] == bodies[1], "canonical sections differ".into())?;
    Ok(format!("{} identical canonical bytes", bodies[0].len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("sharp-gap benchmark", sharp_gap),
        ("closed-form constants", closed_forms),
        ("analytic nonlinear graph", analytic_graph),
        ("contraction certificate", contraction_certificate),
        ("theorem inequalities", theorem_inequalities),
        ("derivative correctness", derivative_correctness),
        ("splitting certification", splitting_certification),
        ("determinism", determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(msg) => println!("PASS criterion {} ({name}): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {msg}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed in {:.1} s", criteria.len() - failed, criteria.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! The `lpm` command-line driver.
//!
//! Exit codes: 0 on success, 2 when the gap condition or the splitting fails or a
//! verification check is violated, 1 for usage, input and other errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::io::{chart_csv, load_problem, stable_csv, LoadError, ProblemEcho, RunReport, SplittingSummary};
use crate::linear::{certify_splitting, resolve_exponents, Anchor};
use crate::problem::{validate_spec, Exponents, GridConfig, ProblemSpec};
use crate::solver::ManifoldSolver;
use crate::verify::{run_benchmarks, verify_problem, BatteryInputs, CheckReport};

#[derive(Debug, Parser)]
#[command(name = "lpm", version, about = "Lyapunov-Perron invariant, inertial and stable manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Gap condition, optimal Lipschitz constants and attraction rate.
    CheckGap(Common),
    /// Measures the splitting bound M for the exponents.
    CertifySplitting(Common),
    /// Samples Σ(τ,·) on a grid of base points.
    ComputeManifold(Common),
    /// Samples Θ(τ,·) on a grid of base points.
    ComputeStable(Common),
    /// Solves for D_ηΣ(τ,η).
    ComputeDerivative(Common),
    /// Runs every inequality check on one problem.
    Verify(Common),
    /// Runs the built-in benchmark battery.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Problem file.
    problem: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    tau: f64,
    /// Base-point grid `start:end:step`, applied to every free coordinate.
    #[arg(long, allow_hyphen_values = true)]
    q: Option<String>,
    /// Initial value `v1,...,vn`.
    #[arg(long, allow_hyphen_values = true)]
    eta: Option<String>,
    #[arg(long, default_value = "lpm_out")]
    out: PathBuf,
    /// Fixed-point tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Overrides the splitting exponent γ (needs --rho).
    #[arg(long, allow_hyphen_values = true, requires = "rho")]
    gamma: Option<f64>,
    /// Overrides the splitting exponent ρ (needs --gamma).
    #[arg(long, allow_hyphen_values = true, requires = "gamma")]
    rho: Option<f64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "lpm_out")]
    out: PathBuf,
    #[arg(long)]
    tol: Option<f64>,
}

/// How a command ended.
enum Outcome {
    Ok,
    ChecksFailed(usize),
    Failed(Error),
    Usage(String),
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let start = Instant::now();
    let (name, out) = match &cli.command {
        Command::CheckGap(c) => ("check-gap", c.out.clone()),
        Command::CertifySplitting(c) => ("certify-splitting", c.out.clone()),
        Command::ComputeManifold(c) => ("compute-manifold", c.out.clone()),
        Command::ComputeStable(c) => ("compute-stable", c.out.clone()),
        Command::ComputeDerivative(c) => ("compute-derivative", c.out.clone()),
        Command::Verify(c) => ("verify", c.out.clone()),
        Command::Bench(b) => ("bench", b.out.clone()),
    };
    let mut report = RunReport::new(name);
    let outcome = match &cli.command {
        Command::CheckGap(c) => with_problem(c, &mut report, check_gap),
        Command::CertifySplitting(c) => with_problem(c, &mut report, certify),
        Command::ComputeManifold(c) => with_problem(c, &mut report, compute_manifold),
        Command::ComputeStable(c) => with_problem(c, &mut report, compute_stable),
        Command::ComputeDerivative(c) => with_problem(c, &mut report, compute_derivative),
        Command::Verify(c) => with_problem(c, &mut report, verify),
        Command::Bench(b) => bench(b, &mut report),
    };
    report.timings.insert("total_s".into(), start.elapsed().as_secs_f64());
    let code = match &outcome {
        Outcome::Ok => 0,
        Outcome::ChecksFailed(n) => {
            report.canonical.status = "checks_failed".into();
            eprintln!("lpm {name}: {n} check(s) failed");
            2
        }
        Outcome::Failed(e) => {
            report.fail(e);
            eprintln!("lpm {name}: {e}");
            if e.is_mathematical() {
                2
            } else {
                1
            }
        }
        Outcome::Usage(msg) => {
            report.canonical.status = "error".into();
            report.canonical.error = Some(crate::io::ErrorEcho {
                kind: "usage".into(),
                message: msg.clone(),
            });
            eprintln!("lpm {name}: {msg}");
            1
        }
    };
    match report.write(&out) {
        Ok(path) => println!("report: {}", path.display()),
        Err(e) => {
            eprintln!("lpm {name}: cannot write report to {}: {e}", out.display());
            return 1;
        }
    }
    code
}

struct Ctx<'a> {
    args: &'a Common,
    spec: ProblemSpec,
    grid: GridConfig,
}

fn with_problem(
    args: &Common,
    report: &mut RunReport,
    body: fn(&Ctx, &mut RunReport) -> Result<Outcome, Error>,
) -> Outcome {
    let (mut spec, mut grid) = match load_problem(&args.problem) {
        Ok(p) => p,
        Err(LoadError::Invalid(e)) => return Outcome::Failed(e),
        Err(e) => return Outcome::Usage(format!("{}: {e}", args.problem.display())),
    };
    if let Some(tol) = args.tol {
        if !(tol > 0.0) {
            return Outcome::Usage(format!("--tol must be positive, got {tol}"));
        }
        grid.tol_fixed_point = tol;
    }
    if let (Some(gamma), Some(rho)) = (args.gamma, args.rho) {
        spec.exponents = Some(Exponents { gamma, rho });
        if let Err(e) = spec.check_shape() {
            return Outcome::Failed(e);
        }
    }
    report.canonical.problem = Some(ProblemEcho::from(&spec));
    report.canonical.grid = Some(grid);
    let ctx = Ctx { args, spec, grid };
    match body(&ctx, report) {
        Ok(o) => o,
        Err(e) => Outcome::Failed(e),
    }
}

fn build_solver(ctx: &Ctx, report: &mut RunReport) -> Result<ManifoldSolver, Error> {
    let solver = ManifoldSolver::new(ctx.spec.clone(), ctx.grid)?;
    report.canonical.exponents_estimated = Some(solver.exponents_estimated);
    report.canonical.gap = Some(solver.gap);
    Ok(solver)
}

fn check_gap(ctx: &Ctx, report: &mut RunReport) -> Result<Outcome, Error> {
    let solver = build_solver(ctx, report)?;
    let g = solver.gap;
    println!(
        "gap holds: sigma* = {:.10}  theta* = {:.10}  kappa_sigma = {:.10}  kappa_theta = {:.10}  omega = {:.10}",
        g.sigma_star, g.theta_star, g.kappa_sigma, g.kappa_theta, g.omega
    );
    Ok(Outcome::Ok)
}

fn certify(ctx: &Ctx, report: &mut RunReport) -> Result<Outcome, Error> {
    validate_spec(&ctx.spec, &ctx.grid)?;
    let (ex, estimated) = resolve_exponents(&ctx.spec, ctx.args.tau, &ctx.grid)?;
    report.canonical.exponents_estimated = Some(estimated);
    let anchor = Anchor::new(&ctx.spec, &ctx.grid, ex, ctx.args.tau)?;
    let cert = certify_splitting(&anchor.fb, ctx.spec.ambient, ex.gamma, ex.rho)?;
    report.canonical.splitting = Some(SplittingSummary::from(&cert));
    report.result("tau", &ctx.args.tau);
    let mut csv = String::from("block,t,value\n");
    for (block, pts) in [("S", &cert.evidence_s), ("N", &cert.evidence_n)] {
        for p in pts {
            csv.push_str(&format!("{block},{:?},{:?}\n", p.t, p.value));
        }
    }
    write_file(&ctx.args.out, "splitting_evidence.csv", &csv)?;
    println!("M = {:.12}  (gamma = {}, rho = {})", cert.m, cert.gamma, cert.rho);
    Ok(Outcome::Ok)
}

fn compute_manifold(ctx: &Ctx, report: &mut RunReport) -> Result<Outcome, Error> {
    let solver = build_solver(ctx, report)?;
    let (n, k) = (ctx.spec.n, ctx.spec.k);
    let points = match base_points(ctx, k, 0)? {
        Some(p) => p,
        None => return Ok(Outcome::Usage("compute-manifold needs --q or --eta".into())),
    };
    let anchor = solver.anchor(ctx.args.tau)?;
    let chart = solver.sample_chart(&anchor, &points);
    write_file(&ctx.args.out, "chart.csv", &chart_csv(&chart, k, n - k))?;
    report.result("chart", &chart);
    report.result("consistent", &chart.is_consistent());
    let failed: Vec<&str> = chart.points.iter().filter_map(|p| p.error.as_deref()).collect();
    if let Some(first) = failed.first() {
        return Ok(Outcome::Usage(format!("{} base point(s) failed, first: {first}", failed.len())));
    }
    if !chart.is_consistent() {
        eprintln!(
            "warning: {} Lipschitz and {} zero-point violations",
            chart.lipschitz_violations.len(),
            chart.zero_violations.len()
        );
    }
    println!("{} points written to {}", chart.points.len(), ctx.args.out.join("chart.csv").display());
    Ok(Outcome::Ok)
}

fn compute_stable(ctx: &Ctx, report: &mut RunReport) -> Result<Outcome, Error> {
    let solver = build_solver(ctx, report)?;
    let (n, k) = (ctx.spec.n, ctx.spec.k);
    let points = match base_points(ctx, n - k, k)? {
        Some(p) => p,
        None => return Ok(Outcome::Usage("compute-stable needs --q or --eta".into())),
    };
    let anchor = solver.anchor(ctx.args.tau)?;
    let mut rows = Vec::with_capacity(points.len());
    for p in points {
        let mut eta = vec![0.0; n];
        eta[k..].copy_from_slice(&p);
        let sol = solver.solve_stable(&anchor, &eta)?;
        rows.push((p, sol));
    }
    write_file(&ctx.args.out, "stable.csv", &stable_csv(ctx.args.tau, &rows, k, n - k))?;
    let summary: Vec<BTreeMap<&str, serde_json::Value>> = rows
        .iter()
        .map(|(p, s)| {
            BTreeMap::from([
                ("p", serde_json::json!(p)),
                ("theta", serde_json::json!(s.theta)),
                ("error_bound", serde_json::json!(s.diagnostics.error_bound())),
                ("iterations", serde_json::json!(s.diagnostics.iterations)),
            ])
        })
        .collect();
    report.result("stable", &summary);
    println!("{} points written to {}", rows.len(), ctx.args.out.join("stable.csv").display());
    Ok(Outcome::Ok)
}

fn compute_derivative(ctx: &Ctx, report: &mut RunReport) -> Result<Outcome, Error> {
    let solver = build_solver(ctx, report)?;
    let n = ctx.spec.n;
    let eta = match &ctx.args.eta {
        Some(s) => match parse_vector(s, n) {
            Ok(v) => v,
            Err(m) => return Ok(Outcome::Usage(m)),
        },
        None => return Ok(Outcome::Usage("compute-derivative needs --eta".into())),
    };
    let anchor = solver.anchor(ctx.args.tau)?;
    let base = solver.solve_unstable(&anchor, &eta)?;
    let d = solver.solve_derivative(&anchor, &base)?;
    let mut csv = String::from("row");
    for j in 1..=n {
        csv.push_str(&format!(",d_{j}"));
    }
    csv.push('\n');
    for (i, row) in d.dsigma.iter().enumerate() {
        csv.push_str(&(i + 1).to_string());
        for v in row {
            csv.push_str(&format!(",{v:?}"));
        }
        csv.push('\n');
    }
    write_file(&ctx.args.out, "derivative.csv", &csv)?;
    report.result("eta", &eta);
    report.result("sigma", &base.sigma);
    report.result("dsigma", &d.dsigma);
    report.result("sigma_error_bound", &base.diagnostics.error_bound());
    report.result("dsigma_error_bound", &d.diagnostics.error_bound());
    for row in &d.dsigma {
        println!("{}", row.iter().map(|v| format!("{v:.10}")).collect::<Vec<_>>().join(" "));
    }
    Ok(Outcome::Ok)
}

fn verify(ctx: &Ctx, report: &mut RunReport) -> Result<Outcome, Error> {
    let solver = build_solver(ctx, report)?;
    let (n, k) = (ctx.spec.n, ctx.spec.k);
    let mut inputs = BatteryInputs::defaults(n, k, ctx.args.tau);
    if let Some(q) = &ctx.args.q {
        inputs.base_points = match parse_range(q) {
            Ok(axis) => tensor_grid(&axis, k),
            Err(m) => return Ok(Outcome::Usage(m)),
        };
    }
    if let Some(s) = &ctx.args.eta {
        match parse_vector(s, n) {
            Ok(v) => inputs.attraction_eta = v,
            Err(m) => return Ok(Outcome::Usage(m)),
        }
    }
    let checks = verify_problem(&solver, &inputs);
    Ok(finish_checks(checks, report))
}

fn bench(args: &BenchArgs, report: &mut RunReport) -> Outcome {
    let mut grid = GridConfig::default();
    if let Some(tol) = args.tol {
        if !(tol > 0.0) {
            return Outcome::Usage(format!("--tol must be positive, got {tol}"));
        }
        grid.tol_fixed_point = tol;
    }
    report.canonical.grid = Some(grid);
    let checks = run_benchmarks(&grid);
    finish_checks(checks, report)
}

fn finish_checks(checks: Vec<CheckReport>, report: &mut RunReport) -> Outcome {
    for c in &checks {
        println!("{}", c.summary());
        report.timings.insert(format!("{:03}_{}_{}", report.timings.len(), c.system, c.check), c.runtime.as_secs_f64());
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    report.canonical.checks = checks;
    if failed == 0 {
        Outcome::Ok
    } else {
        Outcome::ChecksFailed(failed)
    }
}

/// Base points from `--q` (a grid on each of `dim` coordinates) or from the matching
/// coordinates of `--eta`.
fn base_points(ctx: &Ctx, dim: usize, offset: usize) -> Result<Option<Vec<Vec<f64>>>, Error> {
    if let Some(q) = &ctx.args.q {
        let axis = parse_range(q).map_err(Error::InvalidSpec)?;
        return Ok(Some(tensor_grid(&axis, dim)));
    }
    if let Some(s) = &ctx.args.eta {
        let v = parse_vector(s, ctx.spec.n).map_err(Error::InvalidSpec)?;
        return Ok(Some(vec![v[offset..offset + dim].to_vec()]));
    }
    Ok(None)
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), Error> {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(name), body))
        .map_err(|e| Error::InvalidSpec(format!("cannot write {}: {e}", dir.join(name).display())))
}

/// `start:end:step` → the points `start + i·step` up to `end`.
pub fn parse_range(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected start:end:step, got `{s}`");
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let (start, end, step) = (v[0], v[1], v[2]);
    if !(start.is_finite() && end.is_finite() && step > 0.0 && end >= start) {
        return Err(bad());
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return Err(format!("grid `{s}` has {count} points"));
    }
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

pub fn parse_vector(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("expected {n} comma-separated numbers, got `{s}`"))?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(format!("expected {n} finite comma-separated numbers, got `{s}`"));
    }
    Ok(v)
}

fn tensor_grid(axis: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(*a);
                    q
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("-2:2:0.5").unwrap().len(), 9);
        assert_eq!(parse_range("0:1:0.1").unwrap().len(), 11);
        assert_eq!(parse_range("1:1:1").unwrap(), vec![1.0]);
        assert!(parse_range("1:0:0.1").is_err());
        assert!(parse_range("0:1").is_err());
        assert!(parse_range("0:1:0").is_err());
    }

    #[test]
    fn vectors() {
        assert_eq!(parse_vector("1, -0.5", 2).unwrap(), vec![1.0, -0.5]);
        assert!(parse_vector("1", 2).is_err());
        assert!(parse_vector("1,x", 2).is_err());
    }

    #[test]
    fn grids() {
        let g = tensor_grid(&[0.0, 1.0], 2);
        assert_eq!(g, vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(tensor_grid(&[3.0], 1), vec![vec![3.0]]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["lpm"]), 1);
        assert_eq!(run(["lpm", "frobnicate"]), 1);
        assert_eq!(run(["lpm", "--version"]), 0);
    }
}

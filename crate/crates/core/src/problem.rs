//! Problem data: the semilinear system `u' = A(t)u + f(t,u)` in adapted coordinates,
//! its declared Lipschitz constants, the norms, and the numerical grid.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linear::Anchor;

/// Norm on the state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbientNorm {
    #[default]
    Max,
    Sum,
    Euclid,
}

impl AmbientNorm {
    pub fn norm(self, x: &[f64]) -> f64 {
        match self {
            AmbientNorm::Max => x.iter().fold(0.0, |m, v| m.max(v.abs())),
            AmbientNorm::Sum => x.iter().map(|v| v.abs()).sum(),
            AmbientNorm::Euclid => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Induced operator norm.
    pub fn op_norm(self, m: &DMatrix<f64>) -> f64 {
        if m.is_empty() {
            return 0.0;
        }
        match self {
            AmbientNorm::Max => m
                .row_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            AmbientNorm::Sum => m
                .column_iter()
                .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
            AmbientNorm::Euclid => {
                if m.len() == 1 {
                    m[(0, 0)].abs()
                } else {
                    m.clone()
                        .svd(false, false)
                        .singular_values
                        .iter()
                        .fold(0.0, |a, &b| a.max(b))
                }
            }
        }
    }
}

impl fmt::Display for AmbientNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmbientNorm::Max => "max",
            AmbientNorm::Sum => "sum",
            AmbientNorm::Euclid => "euclid",
        })
    }
}

impl FromStr for AmbientNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(AmbientNorm::Max),
            "sum" => Ok(AmbientNorm::Sum),
            "euclid" => Ok(AmbientNorm::Euclid),
            _ => Err(format!("unknown ambient norm `{s}` (max, sum, euclid)")),
        }
    }
}

/// Norm Γ on ℝ² used to recombine the N- and S-part norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AdmissibleNorm {
    /// `p`-norm with `p >= 1`.
    P(f64),
    Max,
}

impl AdmissibleNorm {
    pub fn sum() -> Self {
        AdmissibleNorm::P(1.0)
    }

    pub fn euclid() -> Self {
        AdmissibleNorm::P(2.0)
    }

    pub fn eval(self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.abs(), b.abs());
        match self {
            AdmissibleNorm::Max => a.max(b),
            AdmissibleNorm::P(p) if p == 1.0 => a + b,
            AdmissibleNorm::P(p) if p == 2.0 => a.hypot(b),
            AdmissibleNorm::P(p) => {
                let m = a.max(b);
                if m == 0.0 || m.is_infinite() {
                    return m;
                }
                m * ((a / m).powf(p) + (b / m).powf(p)).powf(1.0 / p)
            }
        }
    }

    /// Smallest `c` with `|a| + |b| <= c Γ(a, b)`.
    pub fn c_gamma(self) -> f64 {
        match self {
            AdmissibleNorm::Max => 2.0,
            AdmissibleNorm::P(p) => 2f64.powf(1.0 - 1.0 / p),
        }
    }
}

impl fmt::Display for AdmissibleNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdmissibleNorm::Max => f.write_str("max"),
            AdmissibleNorm::P(p) if *p == 1.0 => f.write_str("sum"),
            AdmissibleNorm::P(p) if *p == 2.0 => f.write_str("euclid"),
            AdmissibleNorm::P(p) => write!(f, "p{p:?}"),
        }
    }
}

impl FromStr for AdmissibleNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(AdmissibleNorm::Max),
            "sum" => Ok(AdmissibleNorm::P(1.0)),
            "euclid" => Ok(AdmissibleNorm::P(2.0)),
            _ => {
                let p: f64 = s
                    .strip_prefix('p')
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| format!("unknown gamma norm `{s}` (max, sum, euclid, p<real>)"))?;
                if p.is_finite() && p >= 1.0 {
                    Ok(AdmissibleNorm::P(p))
                } else {
                    Err(format!("p-norm needs 1 <= p < inf, got {p}"))
                }
            }
        }
    }
}

impl From<AdmissibleNorm> for String {
    fn from(g: AdmissibleNorm) -> String {
        g.to_string()
    }
}

impl TryFrom<String> for AdmissibleNorm {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// Splitting exponents: `γ` for the forward decay of the S part, `ρ` for the backward
/// control of the N part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub gamma: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    N,
    S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub n: usize,
    pub k: usize,
    /// Row-major `n × n` entries; absent entries are literal zero.
    pub a: Vec<Vec<Expr>>,
    pub f: Vec<Expr>,
    pub l1: f64,
    pub l2: f64,
    pub ambient: AmbientNorm,
    pub gamma_norm: AdmissibleNorm,
    /// Declared splitting exponents, if any.
    pub exponents: Option<Exponents>,
    pub constants: BTreeMap<String, f64>,
}

impl ProblemSpec {
    /// Builds a spec from expression sources. `a` lists the nonzero entries as
    /// zero-based `(row, column, source)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sources(
        name: &str,
        n: usize,
        k: usize,
        a: &[(usize, usize, &str)],
        f: &[&str],
        l1: f64,
        l2: f64,
        constants: BTreeMap<String, f64>,
    ) -> Result<ProblemSpec> {
        if n < 2 || k == 0 || k >= n {
            return Err(Error::InvalidSpec(format!(
                "need n >= 2 and 1 <= k <= n-1, got n = {n}, k = {k}"
            )));
        }
        if f.len() != n {
            return Err(Error::InvalidSpec(format!(
                "expected {n} components of f, got {}",
                f.len()
            )));
        }
        let mut mat = vec![vec![Expr::constant(0.0, n); n]; n];
        for &(i, j, src) in a {
            if i >= n || j >= n {
                return Err(Error::InvalidSpec(format!("entry A{}{} out of range", i + 1, j + 1)));
            }
            mat[i][j] = parse_named(&format!("A{}{}", i + 1, j + 1), src, n, &constants)?;
        }
        let f = f
            .iter()
            .enumerate()
            .map(|(i, src)| parse_named(&format!("f{}", i + 1), src, n, &constants))
            .collect::<Result<Vec<_>>>()?;
        let spec = ProblemSpec {
            name: name.to_string(),
            n,
            k,
            a: mat,
            f,
            l1,
            l2,
            ambient: AmbientNorm::Max,
            gamma_norm: AdmissibleNorm::Max,
            exponents: None,
            constants,
        };
        spec.check_shape()?;
        Ok(spec)
    }

    pub fn with_norms(mut self, ambient: AmbientNorm, gamma_norm: AdmissibleNorm) -> Self {
        self.ambient = ambient;
        self.gamma_norm = gamma_norm;
        self
    }

    pub fn with_exponents(mut self, gamma: f64, rho: f64) -> Self {
        self.exponents = Some(Exponents { gamma, rho });
        self
    }

    /// Structural checks that do not need sampling.
    pub fn check_shape(&self) -> Result<()> {
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(Error::InvalidSpec(format!("lipschitz_l1 must be >= 0, got {}", self.l1)));
        }
        if !(self.l2 > 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidSpec(format!("lipschitz_l2 must be > 0, got {}", self.l2)));
        }
        for (i, row) in self.a.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if e.depends_on_state() {
                    return Err(Error::InvalidSpec(format!(
                        "A{}{} may depend on t only",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if let Some(ex) = self.exponents {
            if !(ex.gamma > ex.rho) {
                return Err(Error::InvalidSpec(format!(
                    "need gamma > rho, got gamma = {}, rho = {}",
                    ex.gamma, ex.rho
                )));
            }
        }
        Ok(())
    }

    pub fn block_dim(&self, b: Block) -> usize {
        match b {
            Block::N => self.k,
            Block::S => self.n - self.k,
        }
    }

    fn block_offset(&self, b: Block) -> usize {
        match b {
            Block::N => 0,
            Block::S => self.k,
        }
    }

    /// Writes the diagonal block of `A(t)` row-major into `out`.
    pub fn a_block_into(&self, b: Block, t: f64, out: &mut [f64]) -> Result<()> {
        let d = self.block_dim(b);
        let o = self.block_offset(b);
        for i in 0..d {
            for j in 0..d {
                let e = &self.a[o + i][o + j];
                out[i * d + j] = if e.is_zero_literal() {
                    0.0
                } else {
                    e.eval(t, &[]).map_err(|source| Error::Eval { t, source })?
                };
            }
        }
        Ok(())
    }

    pub fn a_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.a[i][j].is_zero_literal() {
                    m[(i, j)] = self.a[i][j]
                        .eval(t, &[])
                        .map_err(|source| Error::Eval { t, source })?;
                }
            }
        }
        Ok(m)
    }

    pub fn eval_f(&self, t: f64, u: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.f) {
            *o = e.eval(t, u).map_err(|source| Error::Eval { t, source })?;
        }
        Ok(())
    }

    /// Row-major Jacobian `Df(t,u)`.
    pub fn jacobian_into(&self, t: f64, u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n;
        for (i, e) in self.f.iter().enumerate() {
            e.diff_into(t, u, &mut out[i * n..(i + 1) * n])
                .map_err(|source| Error::Eval { t, source })?;
        }
        Ok(())
    }

    /// Right-hand side `A(t)u + f(t,u)`.
    pub fn rhs(&self, t: f64, u: &[f64], out: &mut [f64]) -> Result<()> {
        self.eval_f(t, u, out)?;
        for i in 0..self.n {
            let mut s = 0.0;
            for (j, uj) in u.iter().enumerate() {
                let e = &self.a[i][j];
                if !e.is_zero_literal() {
                    s += e.eval(t, &[]).map_err(|source| Error::Eval { t, source })? * uj;
                }
            }
            out[i] += s;
        }
        Ok(())
    }

    /// True when `A` does not depend on time.
    pub fn autonomous_linear_part(&self) -> bool {
        self.a.iter().flatten().all(|e| !e.depends_on_time())
    }
}

fn parse_named(
    name: &str,
    src: &str,
    n: usize,
    constants: &BTreeMap<String, f64>,
) -> Result<Expr> {
    Expr::parse_with(src, n, constants).map_err(|source| Error::MalformedExpression {
        name: name.to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub h: f64,
    pub t_window: f64,
    /// Window of the norm suprema; `None` means `30/(γ−ρ)`.
    pub t_norm: Option<f64>,
    pub tol_fixed_point: f64,
    pub tail_tol: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            h: 0.01,
            t_window: 40.0,
            t_norm: None,
            tol_fixed_point: 1e-10,
            tail_tol: 1e-8,
        }
    }
}

impl GridConfig {
    pub fn t_norm_for(&self, ex: Exponents) -> f64 {
        self.t_norm
            .unwrap_or_else(|| (30.0 / (ex.gamma - ex.rho)).min(self.t_window))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.h > 0.0
            && self.t_window > 0.0
            && self.t_norm.is_none_or(|tn| tn > 0.0 && tn <= self.t_window)
            && self.tol_fixed_point > 0.0
            && self.tail_tol > 0.0
            && self.t_window / self.h <= 1e7;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("invalid grid configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn sample_times(grid: &GridConfig) -> Vec<f64> {
    let m = 80;
    (0..=m)
        .map(|i| -grid.t_window + 2.0 * grid.t_window * i as f64 / m as f64)
        .collect()
}

/// Checks block-diagonality, the zero condition and the sign constraints, listing each.
/// Returns the first failure as its typed error.
pub fn validate_spec(spec: &ProblemSpec, grid: &GridConfig) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let mut first_err: Option<Error> = None;
    let mut record = |name: &str, res: Result<String>, checks: &mut Vec<ValidationCheck>| {
        let (passed, detail) = match res {
            Ok(d) => (true, d),
            Err(e) => {
                let d = e.to_string();
                first_err.get_or_insert(e);
                (false, d)
            }
        };
        checks.push(ValidationCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    };

    record("shape_and_signs", spec.check_shape().map(|_| format!(
        "n = {}, k = {}, L1 = {}, L2 = {}", spec.n, spec.k, spec.l1, spec.l2
    )), &mut checks);
    record("grid", grid.validate().map(|_| format!("{grid:?}")), &mut checks);

    let times = sample_times(grid);
    let block = (|| {
        for &t in &times {
            let m = spec.a_matrix(t)?;
            for i in 0..spec.n {
                for j in 0..spec.n {
                    if (i < spec.k) != (j < spec.k) && m[(i, j)] != 0.0 {
                        return Err(Error::NonBlockDiagonal {
                            t,
                            i: i + 1,
                            j: j + 1,
                            value: m[(i, j)],
                        });
                    }
                }
            }
        }
        Ok(format!("off-diagonal blocks vanish at {} sample times", times.len()))
    })();
    record("block_diagonal", block, &mut checks);

    let zero = (|| {
        let u = vec![0.0; spec.n];
        let mut out = vec![0.0; spec.n];
        let mut worst: f64 = 0.0;
        for &t in &times {
            spec.eval_f(t, &u, &mut out)?;
            let norm = spec.ambient.norm(&out);
            if norm > 1e-12 {
                return Err(Error::ZeroConditionViolated { t, norm });
            }
            worst = worst.max(norm);
        }
        Ok(format!("max |f(t,0)| = {worst:e}"))
    })();
    record("zero_condition", zero, &mut checks);

    match first_err {
        Some(e) => Err(e),
        None => Ok(ValidationReport { checks }),
    }
}

/// Empirical Lipschitz quotients of `Qf` and `(I−Q)f` in the moving norms over random
/// pairs in a box. These are lower bounds for the true constants.
pub fn estimate_lipschitz(
    spec: &ProblemSpec,
    anchor: &Anchor,
    samples: usize,
    box_radius: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let k = spec.k;
    let (lo, hi) = anchor.solver_node_range();
    let mut l1: f64 = 0.0;
    let mut l2: f64 = 0.0;
    let mut fu = vec![0.0; n];
    let mut fv = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for _ in 0..samples.max(2) {
        let i = rng.gen_range(lo..=hi);
        let t = anchor.fb.time(i);
        for j in 0..n {
            u[j] = rng.gen_range(-box_radius..=box_radius);
            v[j] = rng.gen_range(-box_radius..=box_radius);
            d[j] = u[j] - v[j];
        }
        let denom = anchor.moving_norm_at(i, &d);
        if denom == 0.0 {
            continue;
        }
        spec.eval_f(t, &u, &mut fu)?;
        spec.eval_f(t, &v, &mut fv)?;
        for j in 0..n {
            d[j] = fu[j] - fv[j];
        }
        l1 = l1.max(anchor.n_norm_at(i, &d[..k]) / denom);
        l2 = l2.max(anchor.s_norm_at(i, &d[k..]) / denom);
    }
    Ok((l1, l2))
}

//! Problem files, run reports and CSV outputs.
//!
//! A problem file is line oriented. Sections `[system]`, `[norms]`, `[grid]`,
//! `[constants]` and `[splitting]` hold `key = value` pairs; several pairs and a section
//! header may share a line. Expressions are double-quoted and `#` starts a comment.
//!
//! ```text
//! [system]  n = 2  k = 1
//! A11 = "1"  A22 = "-1"
//! f1 = "0.6*(-u2)"  f2 = "0.6*u1"
//! lipschitz_l1 = 0.6  lipschitz_l2 = 0.6
//! [norms]  ambient = max  gamma = max
//! [grid]   h = 0.01  t_window = 40  t_norm = 20
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::error::Error;
use crate::expr::{Expr, ExprError};
use crate::gap::GapCertificate;
use crate::linear::SplittingCertificate;
use crate::problem::{AdmissibleNorm, AmbientNorm, Exponents, GridConfig, ProblemSpec};
use crate::solver::{ManifoldChart, StableSolution};
use crate::verify::CheckReport;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{key}`")]
    MissingRequired { key: String },
    #[error("line {line}: `{key}` out of range: {msg}")]
    Range { line: usize, key: String, msg: String },
    #[error("line {line}: expression `{key}`: {source}")]
    Expression { line: usize, key: String, source: ExprError },
    #[error(transparent)]
    Invalid(#[from] Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Section(String),
    Word(String),
    Quoted(String),
    Equals,
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<Token>, LoadError> {
    let mut out = Vec::new();
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => break,
            c if c.is_whitespace() => i += 1,
            '=' => {
                out.push(Token::Equals);
                i += 1;
            }
            '[' => {
                let end = chars[i..].iter().position(|&c| c == ']').ok_or(LoadError::Parse {
                    line: lineno,
                    msg: "unterminated section header".into(),
                })?;
                out.push(Token::Section(chars[i + 1..i + end].iter().collect::<String>().trim().to_string()));
                i += end + 1;
            }
            '"' => {
                let end = chars[i + 1..].iter().position(|&c| c == '"').ok_or(LoadError::Parse {
                    line: lineno,
                    msg: "unterminated string".into(),
                })?;
                out.push(Token::Quoted(chars[i + 1..i + 1 + end].iter().collect()));
                i += end + 2;
            }
            _ => {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '=' | '"' | '[' | '#') {
                    i += 1;
                }
                out.push(Token::Word(chars[start..i].iter().collect()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: String,
    quoted: bool,
}

type Sections = BTreeMap<String, BTreeMap<String, Entry>>;

const SECTIONS: [&str; 5] = ["system", "norms", "grid", "constants", "splitting"];

fn collect(text: &str) -> Result<Sections, LoadError> {
    let mut sections: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens = tokenize(raw, line)?;
        let mut i = 0;
        while i < tokens.len() {
            match &tokens[i] {
                Token::Section(name) => {
                    if !SECTIONS.contains(&name.as_str()) {
                        return Err(LoadError::UnknownSection { line, name: name.clone() });
                    }
                    current = Some(name.clone());
                    sections.entry(name.clone()).or_default();
                    i += 1;
                }
                Token::Word(key) => {
                    let (Some(Token::Equals), Some(value)) = (tokens.get(i + 1), tokens.get(i + 2)) else {
                        return Err(LoadError::Parse { line, msg: format!("expected `{key} = value`") });
                    };
                    let (value, quoted) = match value {
                        Token::Word(w) => (w.clone(), false),
                        Token::Quoted(q) => (q.clone(), true),
                        _ => return Err(LoadError::Parse { line, msg: format!("missing value for `{key}`") }),
                    };
                    let Some(section) = &current else {
                        return Err(LoadError::Parse { line, msg: format!("`{key}` outside any section") });
                    };
                    let map = sections.entry(section.clone()).or_default();
                    if map.contains_key(key) {
                        return Err(LoadError::Duplicate { line, key: key.clone() });
                    }
                    map.insert(key.clone(), Entry { line, value, quoted });
                    i += 3;
                }
                _ => return Err(LoadError::Parse { line, msg: "expected a key or a section header".into() }),
            }
        }
    }
    Ok(sections)
}

fn number(key: &str, e: &Entry) -> Result<f64, LoadError> {
    e.value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| LoadError::Parse {
        line: e.line,
        msg: format!("`{key}` expects a number, got `{}`", e.value),
    })
}

fn integer(key: &str, e: &Entry) -> Result<usize, LoadError> {
    e.value.parse::<usize>().map_err(|_| LoadError::Parse {
        line: e.line,
        msg: format!("`{key}` expects a non-negative integer, got `{}`", e.value),
    })
}

fn range(key: &str, e: &Entry, msg: &str) -> LoadError {
    LoadError::Range {
        line: e.line,
        key: key.into(),
        msg: msg.into(),
    }
}

/// `A11`, `A_1_1` → zero-based `(0, 0)`.
fn matrix_index(key: &str, n: usize) -> Option<(usize, usize)> {
    let rest = key.strip_prefix('A')?;
    let (i, j) = if let Some(r) = rest.strip_prefix('_') {
        let (i, j) = r.split_once('_')?;
        (i.parse::<usize>().ok()?, j.parse::<usize>().ok()?)
    } else if rest.len() == 2 && rest.chars().all(|c| c.is_ascii_digit()) {
        (rest[..1].parse().ok()?, rest[1..].parse().ok()?)
    } else {
        return None;
    };
    (i >= 1 && j >= 1 && i <= n && j <= n).then(|| (i - 1, j - 1))
}

fn f_index(key: &str, n: usize) -> Option<usize> {
    let i: usize = key.strip_prefix('f')?.parse().ok()?;
    (i >= 1 && i <= n).then(|| i - 1)
}

fn expression(key: &str, e: &Entry, n: usize, constants: &BTreeMap<String, f64>) -> Result<String, LoadError> {
    if !e.quoted {
        return Err(LoadError::Parse {
            line: e.line,
            msg: format!("`{key}` expects a quoted expression"),
        });
    }
    Expr::parse_with(&e.value, n, constants).map_err(|source| LoadError::Expression {
        line: e.line,
        key: key.into(),
        source,
    })?;
    Ok(e.value.clone())
}

/// Parses problem-file text into a spec and its grid.
pub fn parse_problem(text: &str) -> Result<(ProblemSpec, GridConfig), LoadError> {
    let sections = collect(text)?;
    let empty = BTreeMap::new();
    let get = |s: &str| sections.get(s).unwrap_or(&empty);

    let mut constants = BTreeMap::new();
    for (key, e) in get("constants") {
        let valid = key.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !valid {
            return Err(LoadError::Parse { line: e.line, msg: format!("invalid constant name `{key}`") });
        }
        constants.insert(key.clone(), number(key, e)?);
    }

    let system = get("system");
    let req = |key: &str| system.get(key).ok_or(LoadError::MissingRequired { key: key.into() });
    let n = integer("n", req("n")?)?;
    let k = integer("k", req("k")?)?;
    if n < 2 {
        return Err(range("n", req("n")?, "need n >= 2"));
    }
    if k == 0 || k >= n {
        return Err(range("k", req("k")?, "need 1 <= k < n"));
    }
    let l1 = number("lipschitz_l1", req("lipschitz_l1")?)?;
    if l1 < 0.0 {
        return Err(range("lipschitz_l1", req("lipschitz_l1")?, "need L1 >= 0"));
    }
    let l2 = number("lipschitz_l2", req("lipschitz_l2")?)?;
    if l2 <= 0.0 {
        return Err(range("lipschitz_l2", req("lipschitz_l2")?, "need L2 > 0"));
    }
    let mut name = "problem".to_string();
    let mut a_src: Vec<(usize, usize, String)> = Vec::new();
    let mut f_src = vec!["0".to_string(); n];
    for (key, e) in system {
        match key.as_str() {
            "n" | "k" | "lipschitz_l1" | "lipschitz_l2" => {}
            "name" => name = e.value.clone(),
            _ => {
                if let Some((i, j)) = matrix_index(key, n) {
                    a_src.push((i, j, expression(key, e, n, &constants)?));
                } else if let Some(i) = f_index(key, n) {
                    f_src[i] = expression(key, e, n, &constants)?;
                } else {
                    return Err(LoadError::UnknownKey {
                        line: e.line,
                        section: "system".into(),
                        key: key.clone(),
                    });
                }
            }
        }
    }

    let mut ambient = AmbientNorm::default();
    let mut gamma_norm = AdmissibleNorm::Max;
    for (key, e) in get("norms") {
        match key.as_str() {
            "ambient" => ambient = e.value.parse().map_err(|m: String| range(key, e, &m))?,
            "gamma" => gamma_norm = e.value.parse().map_err(|m: String| range(key, e, &m))?,
            _ => {
                return Err(LoadError::UnknownKey {
                    line: e.line,
                    section: "norms".into(),
                    key: key.clone(),
                })
            }
        }
    }

    let mut grid = GridConfig::default();
    for (key, e) in get("grid") {
        let v = number(key, e)?;
        match key.as_str() {
            "h" => grid.h = v,
            "t_window" => grid.t_window = v,
            "t_norm" => grid.t_norm = Some(v),
            "tol" => grid.tol_fixed_point = v,
            "tail_tol" => grid.tail_tol = v,
            _ => {
                return Err(LoadError::UnknownKey {
                    line: e.line,
                    section: "grid".into(),
                    key: key.clone(),
                })
            }
        }
        if !(v > 0.0) {
            return Err(range(key, e, "must be positive"));
        }
    }
    grid.validate()?;

    let mut exponents = None;
    let split = get("splitting");
    if !split.is_empty() {
        let mut gamma = None;
        let mut rho = None;
        for (key, e) in split {
            match key.as_str() {
                "gamma" => gamma = Some(number(key, e)?),
                "rho" => rho = Some(number(key, e)?),
                _ => {
                    return Err(LoadError::UnknownKey {
                        line: e.line,
                        section: "splitting".into(),
                        key: key.clone(),
                    })
                }
            }
        }
        let gamma = gamma.ok_or(LoadError::MissingRequired { key: "gamma".into() })?;
        let rho = rho.ok_or(LoadError::MissingRequired { key: "rho".into() })?;
        if !(gamma > rho) {
            return Err(range("gamma", &split["gamma"], "need gamma > rho"));
        }
        exponents = Some(Exponents { gamma, rho });
    }

    let a_refs: Vec<(usize, usize, &str)> = a_src.iter().map(|(i, j, s)| (*i, *j, s.as_str())).collect();
    let f_refs: Vec<&str> = f_src.iter().map(String::as_str).collect();
    let mut spec = ProblemSpec::from_sources(&name, n, k, &a_refs, &f_refs, l1, l2, constants)?
        .with_norms(ambient, gamma_norm);
    spec.exponents = exponents;
    spec.check_shape()?;
    Ok((spec, grid))
}

pub fn load_problem(path: &Path) -> Result<(ProblemSpec, GridConfig), LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_problem(&text)
}

/// Writes a problem file that [`parse_problem`] reads back to the same spec and grid.
pub fn save_problem(spec: &ProblemSpec, grid: &GridConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[system]");
    let _ = writeln!(s, "name = \"{}\"", spec.name);
    let _ = writeln!(s, "n = {}  k = {}", spec.n, spec.k);
    for (i, row) in spec.a.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if !e.is_zero_literal() {
                let _ = writeln!(s, "A_{}_{} = \"{}\"", i + 1, j + 1, e);
            }
        }
    }
    for (i, e) in spec.f.iter().enumerate() {
        let _ = writeln!(s, "f{} = \"{}\"", i + 1, e);
    }
    let _ = writeln!(s, "lipschitz_l1 = {:?}  lipschitz_l2 = {:?}", spec.l1, spec.l2);
    let _ = writeln!(s, "[norms]\nambient = {}  gamma = {}", spec.ambient, spec.gamma_norm);
    let _ = writeln!(s, "[grid]\nh = {:?}  t_window = {:?}", grid.h, grid.t_window);
    if let Some(tn) = grid.t_norm {
        let _ = writeln!(s, "t_norm = {tn:?}");
    }
    let _ = writeln!(s, "tol = {:?}  tail_tol = {:?}", grid.tol_fixed_point, grid.tail_tol);
    if !spec.constants.is_empty() {
        let _ = writeln!(s, "[constants]");
        for (k, v) in &spec.constants {
            let _ = writeln!(s, "{k} = {v:?}");
        }
    }
    if let Some(ex) = spec.exponents {
        let _ = writeln!(s, "[splitting]\ngamma = {:?}  rho = {:?}", ex.gamma, ex.rho);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemEcho {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub a: Vec<Vec<String>>,
    pub f: Vec<String>,
    pub lipschitz_l1: f64,
    pub lipschitz_l2: f64,
    pub ambient: String,
    pub gamma: String,
    pub exponents: Option<Exponents>,
    pub constants: BTreeMap<String, f64>,
}

impl From<&ProblemSpec> for ProblemEcho {
    fn from(s: &ProblemSpec) -> Self {
        ProblemEcho {
            name: s.name.clone(),
            n: s.n,
            k: s.k,
            a: s.a.iter().map(|r| r.iter().map(|e| e.to_string()).collect()).collect(),
            f: s.f.iter().map(|e| e.to_string()).collect(),
            lipschitz_l1: s.l1,
            lipschitz_l2: s.l2,
            ambient: s.ambient.to_string(),
            gamma: s.gamma_norm.to_string(),
            exponents: s.exponents,
            constants: s.constants.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingSummary {
    pub gamma: f64,
    pub rho: f64,
    pub m: f64,
    pub window_truncated: bool,
    pub evidence_points: usize,
    pub max_evidence_s: f64,
    pub max_evidence_n: f64,
}

impl From<&SplittingCertificate> for SplittingSummary {
    fn from(c: &SplittingCertificate) -> Self {
        let max = |v: &[crate::linear::EvidencePoint]| v.iter().map(|p| p.value).fold(0.0, f64::max);
        SplittingSummary {
            gamma: c.gamma,
            rho: c.rho,
            m: c.m,
            window_truncated: c.window_truncated,
            evidence_points: c.evidence_s.len() + c.evidence_n.len(),
            max_evidence_s: max(&c.evidence_s),
            max_evidence_n: max(&c.evidence_n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEcho {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorEcho {
    fn from(e: &Error) -> Self {
        ErrorEcho {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

/// Deterministic part of a run report: no timestamps or timings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CanonicalReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub status: String,
    pub problem: Option<ProblemEcho>,
    pub grid: Option<GridConfig>,
    pub exponents_estimated: Option<bool>,
    pub splitting: Option<SplittingSummary>,
    pub gap: Option<GapCertificate>,
    pub results: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<CheckReport>,
    pub error: Option<ErrorEcho>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub canonical: CanonicalReport,
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(command: &str) -> RunReport {
        RunReport {
            canonical: CanonicalReport {
                tool: "lpm".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                status: "ok".into(),
                problem: None,
                grid: None,
                exponents_estimated: None,
                splitting: None,
                gap: None,
                results: BTreeMap::new(),
                checks: Vec::new(),
                error: None,
            },
            timings: BTreeMap::new(),
        }
    }

    pub fn result<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.canonical.results.insert(key.into(), v);
    }

    pub fn fail(&mut self, err: &Error) {
        self.canonical.status = if err.is_mathematical() { "mathematical_failure" } else { "error" }.into();
        self.canonical.error = Some(ErrorEcho::from(err));
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(&self.canonical).expect("report serializes") + "\n"
    }

    /// Writes `report.json` (canonical and timings) and `report.canonical.json`.
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let full = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        let path = dir.join("report.json");
        std::fs::write(&path, full)?;
        std::fs::write(dir.join("report.canonical.json"), self.canonical_json())?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Chart CSV: `tau, q_1.., sigma_1.., iterations, apost_error, tail_bound`.
pub fn chart_csv(chart: &ManifoldChart, k: usize, d: usize) -> String {
    let mut s = String::from("tau");
    for i in 1..=k {
        let _ = write!(s, ",q_{i}");
    }
    for i in 1..=d {
        let _ = write!(s, ",sigma_{i}");
    }
    s.push_str(",iterations,apost_error,tail_bound\n");
    for p in &chart.points {
        let mut row = vec![fmt(chart.tau)];
        row.extend(p.q.iter().map(|v| fmt(*v)));
        match (&p.sigma, &p.diagnostics) {
            (Some(sig), Some(di)) => {
                row.extend(sig.iter().map(|v| fmt(*v)));
                row.push(di.iterations.to_string());
                row.push(fmt(di.apost_error));
                row.push(fmt(di.tail_bound));
            }
            _ => {
                row.extend(std::iter::repeat_n("NaN".to_string(), d + 1));
                row.push("NaN".into());
                row.push("NaN".into());
            }
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Stable-manifold CSV: `tau, p_1.., theta_1.., iterations, apost_error, tail_bound`.
pub fn stable_csv(tau: f64, rows: &[(Vec<f64>, StableSolution)], k: usize, d: usize) -> String {
    let mut s = String::from("tau");
    for i in 1..=d {
        let _ = write!(s, ",p_{i}");
    }
    for i in 1..=k {
        let _ = write!(s, ",theta_{i}");
    }
    s.push_str(",iterations,apost_error,tail_bound\n");
    for (p, sol) in rows {
        let mut row = vec![fmt(tau)];
        row.extend(p.iter().map(|v| fmt(*v)));
        row.extend(sol.theta.iter().map(|v| fmt(*v)));
        row.push(sol.diagnostics.iterations.to_string());
        row.push(fmt(sol.diagnostics.apost_error));
        row.push(fmt(sol.diagnostics.tail_bound));
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems;

    const MINIMAL: &str = r#"
[system]  n = 2  k = 1
A11 = "1"  A22 = "-1"
f1 = "0.6*(-u2)"  f2 = "0.6*u1"
lipschitz_l1 = 0.6  lipschitz_l2 = 0.6
[norms]  ambient = max  gamma = max
[grid]   h = 0.01  t_window = 40  t_norm = 20
"#;

    #[test]
    fn minimal_file_loads_with_defaults() {
        let (spec, grid) = parse_problem(MINIMAL).unwrap();
        assert_eq!((spec.n, spec.k, spec.l1, spec.l2), (2, 1, 0.6, 0.6));
        assert_eq!(grid.t_norm, Some(20.0));
        assert_eq!(grid.tol_fixed_point, 1e-10);
        assert_eq!(spec.exponents, None);
        let reference = systems::rotgap(0.6);
        for t in [0.0, 1.3] {
            assert_eq!(spec.a_matrix(t).unwrap(), reference.a_matrix(t).unwrap());
            let u = [0.4, -1.1];
            let (mut x, mut y) = ([0.0; 2], [0.0; 2]);
            spec.eval_f(t, &u, &mut x).unwrap();
            reference.eval_f(t, &u, &mut y).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn negative_l2_is_a_range_error() {
        let text = MINIMAL.replace("lipschitz_l2 = 0.6", "lipschitz_l2 = -1");
        assert!(matches!(parse_problem(&text), Err(LoadError::Range { line: 5, .. })));
        let text = MINIMAL.replace("lipschitz_l2 = 0.6", "");
        assert!(matches!(parse_problem(&text), Err(LoadError::MissingRequired { .. })));
    }

    #[test]
    fn undefined_constant_reports_its_line() {
        let text = MINIMAL.replace("f1 = \"0.6*(-u2)\"", "f1 = \"eps*(-u2)\"");
        match parse_problem(&text) {
            Err(LoadError::Expression { line: 4, source: ExprError::UnknownIdentifier { name, .. }, .. }) => {
                assert_eq!(name, "eps")
            }
            other => panic!("{other:?}"),
        }
        let text = format!("{text}[constants]\neps = 0.6\n");
        let (spec, _) = parse_problem(&text).unwrap();
        assert_eq!(spec.constants["eps"], 0.6);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let text = MINIMAL.replace("t_norm = 20", "t_norm = 20  colour = 3");
        assert!(matches!(parse_problem(&text), Err(LoadError::UnknownKey { line: 7, .. })));
        let text = format!("{MINIMAL}[extras]\n");
        assert!(matches!(parse_problem(&text), Err(LoadError::UnknownSection { .. })));
        let text = MINIMAL.replace("A11 = \"1\"", "A11 = \"1\" A11 = \"2\"");
        assert!(matches!(parse_problem(&text), Err(LoadError::Duplicate { .. })));
        let text = MINIMAL.replace("A11 = \"1\"", "A11 = 1");
        assert!(matches!(parse_problem(&text), Err(LoadError::Parse { line: 3, .. })));
    }

    #[test]
    fn shape_errors_propagate() {
        let text = MINIMAL.replace("A22 = \"-1\"", "A22 = \"-1\"  A12 = \"sin(t)\"");
        assert!(parse_problem(&text).is_ok());
        let text = MINIMAL.replace("A22 = \"-1\"", "A22 = \"-1*u1\"");
        assert!(matches!(parse_problem(&text), Err(LoadError::Invalid(_))));
    }

    #[test]
    fn round_trip() {
        let mut specs = vec![
            (systems::rotgap(0.6), GridConfig::default()),
            (systems::periodic_forced(), GridConfig { t_norm: Some(12.5), ..GridConfig::default() }),
            (systems::rotating_decay(), GridConfig { h: 0.005, ..GridConfig::default() }),
        ];
        let (mut with_consts, g) = parse_problem(&format!(
            "{}[constants]\neps = 0.25\n",
            MINIMAL.replace("0.6*u1", "eps*u1-2.5e-3*t")
        ))
        .unwrap();
        with_consts.name = "consts".into();
        specs.push((with_consts, g));
        for (spec, grid) in specs {
            let text = save_problem(&spec, &grid);
            let (back, gback) = parse_problem(&text).unwrap();
            assert_eq!(back, spec, "{text}");
            assert_eq!(gback, grid);
        }
    }

    #[test]
    fn matrix_keys() {
        assert_eq!(matrix_index("A11", 2), Some((0, 0)));
        assert_eq!(matrix_index("A_10_3", 12), Some((9, 2)));
        assert_eq!(matrix_index("A31", 2), None);
        assert_eq!(matrix_index("A1", 2), None);
        assert_eq!(f_index("f2", 2), Some(1));
        assert_eq!(f_index("f0", 2), None);
    }

    #[test]
    fn report_sections_are_separate() {
        let mut r = RunReport::new("check-gap");
        r.result("x", &1.5);
        r.timings.insert("total_s".into(), 0.25);
        let c = r.canonical_json();
        assert!(c.contains("\"x\": 1.5"));
        assert!(!c.contains("total_s"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let full = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert!(full.contains("total_s"));
        assert_eq!(std::fs::read_to_string(dir.path().join("report.canonical.json")).unwrap(), c);
    }
}

//! Scalar expression language for the entries of `A(t)` and the components of `f(t,u)`.
//!
//! ```text
//! expr  := term (('+'|'-') term)*
//! term  := unary (('*'|'/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 't' | 'u' index | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Trees are immutable after parsing. [`Expr::eval`] never returns NaN silently and
//! [`Expr::diff`] computes exact partial derivatives by forward-mode sweeps.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown identifier `{name}` at {pos}")]
    UnknownIdentifier { name: String, pos: usize },
    #[error("variable u{index} at {pos} exceeds dimension {n}")]
    IndexOutOfRange { index: usize, n: usize, pos: usize },
    #[error("domain error at {pos}: {what}")]
    EvalDomain { pos: usize, what: &'static str },
    #[error("not differentiable at {pos}: {what}")]
    NotDifferentiable { pos: usize, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone)]
pub enum Node {
    Num(f64),
    Time,
    /// Zero-based state index.
    Var(usize),
    Neg(Box<Spanned>),
    Bin(BinOp, Box<Spanned>, Box<Spanned>),
    Call(Func, Box<Spanned>),
}

/// A node together with its byte offset in the source.
#[derive(Debug, Clone)]
pub struct Spanned {
    pub node: Node,
    pub pos: usize,
}

impl PartialEq for Spanned {
    fn eq(&self, other: &Self) -> bool {
        match (&self.node, &other.node) {
            (Node::Num(a), Node::Num(b)) => a.to_bits() == b.to_bits(),
            (Node::Time, Node::Time) => true,
            (Node::Var(a), Node::Var(b)) => a == b,
            (Node::Neg(a), Node::Neg(b)) => a == b,
            (Node::Bin(o1, a1, b1), Node::Bin(o2, a2, b2)) => o1 == o2 && a1 == a2 && b1 == b2,
            (Node::Call(f1, a1), Node::Call(f2, a2)) => f1 == f2 && a1 == a2,
            _ => false,
        }
    }
}

/// A parsed expression in `t` and `u1..un`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Spanned,
    n: usize,
}

impl Expr {
    pub fn parse(src: &str, n: usize) -> Result<Expr, ExprError> {
        Expr::parse_with(src, n, &BTreeMap::new())
    }

    /// Parses with named scalar constants substituted as literals.
    pub fn parse_with(
        src: &str,
        n: usize,
        constants: &BTreeMap<String, f64>,
    ) -> Result<Expr, ExprError> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
            n,
            constants,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(ExprError::Syntax {
                pos: p.pos,
                msg: format!("unexpected `{}`", p.src[p.pos] as char),
            });
        }
        Ok(Expr { root, n })
    }

    pub fn constant(value: f64, n: usize) -> Expr {
        Expr {
            root: Spanned {
                node: Node::Num(value),
                pos: 0,
            },
            n,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn root(&self) -> &Spanned {
        &self.root
    }

    /// Literal zero, the default for absent matrix entries.
    pub fn is_zero_literal(&self) -> bool {
        matches!(self.root.node, Node::Num(v) if v == 0.0)
    }

    pub fn depends_on_time(&self) -> bool {
        fn walk(s: &Spanned) -> bool {
            match &s.node {
                Node::Time => true,
                Node::Num(_) | Node::Var(_) => false,
                Node::Neg(a) | Node::Call(_, a) => walk(a),
                Node::Bin(_, a, b) => walk(a) || walk(b),
            }
        }
        walk(&self.root)
    }

    pub fn depends_on_state(&self) -> bool {
        fn walk(s: &Spanned) -> bool {
            match &s.node {
                Node::Var(_) => true,
                Node::Num(_) | Node::Time => false,
                Node::Neg(a) | Node::Call(_, a) => walk(a),
                Node::Bin(_, a, b) => walk(a) || walk(b),
            }
        }
        walk(&self.root)
    }

    pub fn eval(&self, t: f64, u: &[f64]) -> Result<f64, ExprError> {
        debug_assert!(u.len() >= self.n || !self.depends_on_state());
        eval_node(&self.root, t, u)
    }

    /// Value and gradient with respect to `u`.
    pub fn diff(&self, t: f64, u: &[f64]) -> Result<(f64, Vec<f64>), ExprError> {
        let mut grad = vec![0.0; self.n];
        let v = self.diff_into(t, u, &mut grad)?;
        Ok((v, grad))
    }

    /// Writes the gradient into `grad` (length `n`) and returns the value.
    pub fn diff_into(&self, t: f64, u: &[f64], grad: &mut [f64]) -> Result<f64, ExprError> {
        let d = diff_node(&self.root, t, u, self.n)?;
        match d.grad {
            Some(g) => grad.copy_from_slice(&g),
            None => grad.iter_mut().for_each(|x| *x = 0.0),
        }
        Ok(d.value)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

fn write_node(s: &Spanned, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match &s.node {
        Node::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
            write!(f, "(-{:?})", -v)
        }
        Node::Num(v) => write!(f, "{:?}", v),
        Node::Time => write!(f, "t"),
        Node::Var(i) => write!(f, "u{}", i + 1),
        Node::Neg(a) => {
            write!(f, "(-")?;
            write_node(a, f)?;
            write!(f, ")")
        }
        Node::Bin(op, a, b) => {
            write!(f, "(")?;
            write_node(a, f)?;
            write!(f, "{}", op.symbol())?;
            write_node(b, f)?;
            write!(f, ")")
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(a, f)?;
            write!(f, ")")
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n: usize,
    constants: &'a BTreeMap<String, f64>,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn err(&self, msg: impl Into<String>) -> ExprError {
        ExprError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn expr(&mut self) -> Result<Spanned, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            let pos = self.pos;
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Spanned {
                node: Node::Bin(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Spanned, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            let pos = self.pos;
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Spanned {
                node: Node::Bin(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Spanned, ExprError> {
        if self.peek() == Some(b'-') {
            let pos = self.pos;
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(match inner.node {
                Node::Num(v) => Spanned {
                    node: Node::Num(-v),
                    pos,
                },
                _ => Spanned {
                    node: Node::Neg(Box::new(inner)),
                    pos,
                },
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Spanned, ExprError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            let pos = self.pos;
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Spanned {
                node: Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)),
                pos,
            });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Spanned, ExprError> {
        let c = match self.peek() {
            Some(c) => c,
            None => return Err(self.err("unexpected end of input")),
        };
        let start = self.pos;
        if c == b'(' {
            self.pos += 1;
            let inner = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err("expected `)`"));
            }
            self.pos += 1;
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number();
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default();
            return self.identifier(name, start);
        }
        Err(self.err(format!("unexpected `{}`", c as char)))
    }

    fn identifier(&mut self, name: &str, start: usize) -> Result<Spanned, ExprError> {
        if name == "t" {
            return Ok(Spanned {
                node: Node::Time,
                pos: start,
            });
        }
        if let Some(digits) = name.strip_prefix('u') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                let index: usize = digits.parse().map_err(|_| ExprError::Syntax {
                    pos: start,
                    msg: "variable index too large".into(),
                })?;
                if index == 0 {
                    return Err(ExprError::Syntax {
                        pos: start,
                        msg: "variable indices start at 1".into(),
                    });
                }
                if index > self.n {
                    return Err(ExprError::IndexOutOfRange {
                        index,
                        n: self.n,
                        pos: start,
                    });
                }
                return Ok(Spanned {
                    node: Node::Var(index - 1),
                    pos: start,
                });
            }
        }
        if let Some(func) = Func::from_name(name) {
            if self.peek() != Some(b'(') {
                return Err(self.err(format!("expected `(` after `{name}`")));
            }
            self.pos += 1;
            let arg = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err("expected `)`"));
            }
            self.pos += 1;
            return Ok(Spanned {
                node: Node::Call(func, Box::new(arg)),
                pos: start,
            });
        }
        if let Some(&v) = self.constants.get(name) {
            return Ok(Spanned {
                node: Node::Num(v),
                pos: start,
            });
        }
        Err(ExprError::UnknownIdentifier {
            name: name.to_string(),
            pos: start,
        })
    }

    fn number(&mut self) -> Result<Spanned, ExprError> {
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i < s.len() && s[i] == b'.' {
            i += 1;
            while i < s.len() && s[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).unwrap_or_default();
        let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
            pos: start,
            msg: format!("malformed number `{text}`"),
        })?;
        self.pos = i;
        Ok(Spanned {
            node: Node::Num(value),
            pos: start,
        })
    }
}

fn domain(pos: usize, what: &'static str) -> ExprError {
    ExprError::EvalDomain { pos, what }
}

fn finite(v: f64, pos: usize) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain(pos, "non-finite result"))
    }
}

fn integer_exponent(e: f64) -> Option<i32> {
    if e.fract() == 0.0 && e.abs() <= i32::MAX as f64 {
        Some(e as i32)
    } else {
        None
    }
}

fn pow(b: f64, e: f64, pos: usize) -> Result<f64, ExprError> {
    match integer_exponent(e) {
        Some(k) => {
            if b == 0.0 && k < 0 {
                return Err(domain(pos, "zero to a negative power"));
            }
            finite(b.powi(k), pos)
        }
        None => {
            if b <= 0.0 {
                return Err(domain(pos, "non-integer power of a non-positive base"));
            }
            finite(b.powf(e), pos)
        }
    }
}

fn apply(func: Func, x: f64, pos: usize) -> Result<f64, ExprError> {
    let v = match func {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Tan => x.tan(),
        Func::Tanh => x.tanh(),
        Func::Exp => x.exp(),
        Func::Log => {
            if x <= 0.0 {
                return Err(domain(pos, "log of a non-positive argument"));
            }
            x.ln()
        }
        Func::Sqrt => {
            if x < 0.0 {
                return Err(domain(pos, "sqrt of a negative argument"));
            }
            x.sqrt()
        }
        Func::Abs => x.abs(),
    };
    finite(v, pos)
}

fn eval_node(s: &Spanned, t: f64, u: &[f64]) -> Result<f64, ExprError> {
    match &s.node {
        Node::Num(v) => Ok(*v),
        Node::Time => Ok(t),
        Node::Var(i) => Ok(u[*i]),
        Node::Neg(a) => Ok(-eval_node(a, t, u)?),
        Node::Bin(op, a, b) => {
            let x = eval_node(a, t, u)?;
            let y = eval_node(b, t, u)?;
            match op {
                BinOp::Add => finite(x + y, s.pos),
                BinOp::Sub => finite(x - y, s.pos),
                BinOp::Mul => finite(x * y, s.pos),
                BinOp::Div => {
                    if y == 0.0 {
                        Err(domain(s.pos, "division by zero"))
                    } else {
                        finite(x / y, s.pos)
                    }
                }
                BinOp::Pow => pow(x, y, s.pos),
            }
        }
        Node::Call(func, a) => apply(*func, eval_node(a, t, u)?, s.pos),
    }
}

/// Dual number whose gradient is `None` when identically zero.
struct Dual {
    value: f64,
    grad: Option<Vec<f64>>,
}

impl Dual {
    fn constant(value: f64) -> Dual {
        Dual { value, grad: None }
    }

    fn scaled(self, value: f64, factor: f64) -> Dual {
        Dual {
            value,
            grad: self.grad.map(|mut g| {
                g.iter_mut().for_each(|x| *x *= factor);
                g
            }),
        }
    }
}

fn combine(a: Option<Vec<f64>>, ca: f64, b: Option<Vec<f64>>, cb: f64) -> Option<Vec<f64>> {
    match (a, b) {
        (None, None) => None,
        (Some(mut g), None) => {
            g.iter_mut().for_each(|x| *x *= ca);
            Some(g)
        }
        (None, Some(mut g)) => {
            g.iter_mut().for_each(|x| *x *= cb);
            Some(g)
        }
        (Some(mut g), Some(h)) => {
            g.iter_mut().zip(h).for_each(|(x, y)| *x = ca * *x + cb * y);
            Some(g)
        }
    }
}

fn diff_node(s: &Spanned, t: f64, u: &[f64], n: usize) -> Result<Dual, ExprError> {
    let pos = s.pos;
    match &s.node {
        Node::Num(v) => Ok(Dual::constant(*v)),
        Node::Time => Ok(Dual::constant(t)),
        Node::Var(i) => {
            let mut g = vec![0.0; n];
            g[*i] = 1.0;
            Ok(Dual {
                value: u[*i],
                grad: Some(g),
            })
        }
        Node::Neg(a) => {
            let d = diff_node(a, t, u, n)?;
            let v = -d.value;
            Ok(d.scaled(v, -1.0))
        }
        Node::Bin(op, a, b) => {
            let x = diff_node(a, t, u, n)?;
            let y = diff_node(b, t, u, n)?;
            match op {
                BinOp::Add => Ok(Dual {
                    value: finite(x.value + y.value, pos)?,
                    grad: combine(x.grad, 1.0, y.grad, 1.0),
                }),
                BinOp::Sub => Ok(Dual {
                    value: finite(x.value - y.value, pos)?,
                    grad: combine(x.grad, 1.0, y.grad, -1.0),
                }),
                BinOp::Mul => Ok(Dual {
                    value: finite(x.value * y.value, pos)?,
                    grad: combine(x.grad, y.value, y.grad, x.value),
                }),
                BinOp::Div => {
                    if y.value == 0.0 {
                        return Err(domain(pos, "division by zero"));
                    }
                    let q = finite(x.value / y.value, pos)?;
                    Ok(Dual {
                        value: q,
                        grad: combine(x.grad, 1.0 / y.value, y.grad, -q / y.value),
                    })
                }
                BinOp::Pow => {
                    let value = pow(x.value, y.value, pos)?;
                    match (y.grad.is_none(), integer_exponent(y.value)) {
                        (true, Some(k)) => {
                            let dk = if k == 0 {
                                0.0
                            } else {
                                k as f64 * pow(x.value, (k - 1) as f64, pos)?
                            };
                            Ok(x.scaled(value, dk))
                        }
                        _ => {
                            if x.value <= 0.0 {
                                return Err(ExprError::NotDifferentiable {
                                    pos,
                                    what: "power with non-positive base",
                                });
                            }
                            let ln_b = x.value.ln();
                            Ok(Dual {
                                value,
                                grad: combine(
                                    x.grad,
                                    value * y.value / x.value,
                                    y.grad,
                                    value * ln_b,
                                ),
                            })
                        }
                    }
                }
            }
        }
        Node::Call(func, a) => {
            let d = diff_node(a, t, u, n)?;
            let x = d.value;
            let value = apply(*func, x, pos)?;
            let slope = match func {
                Func::Sin => x.cos(),
                Func::Cos => -x.sin(),
                Func::Tan => 1.0 + value * value,
                Func::Tanh => 1.0 - value * value,
                Func::Exp => value,
                Func::Log => 1.0 / x,
                Func::Sqrt => {
                    if x == 0.0 {
                        return Err(ExprError::NotDifferentiable {
                            pos,
                            what: "sqrt at 0",
                        });
                    }
                    0.5 / value
                }
                Func::Abs => {
                    if x == 0.0 {
                        if d.grad.is_none() {
                            0.0
                        } else {
                            return Err(ExprError::NotDifferentiable {
                                pos,
                                what: "abs at 0",
                            });
                        }
                    } else {
                        x.signum()
                    }
                }
            };
            Ok(d.scaled(value, slope))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn num(v: f64) -> Spanned {
        Spanned {
            node: Node::Num(v),
            pos: 0,
        }
    }

    fn var(i: usize) -> Spanned {
        Spanned {
            node: Node::Var(i),
            pos: 0,
        }
    }

    #[test]
    fn parses_scaled_negation() {
        let e = Expr::parse("0.6*(-u2)", 2).unwrap();
        let expected = Spanned {
            node: Node::Bin(
                BinOp::Mul,
                Box::new(num(0.6)),
                Box::new(Spanned {
                    node: Node::Neg(Box::new(var(1))),
                    pos: 0,
                }),
            ),
            pos: 0,
        };
        assert_eq!(e.root, expected);
    }

    #[test]
    fn parses_products_of_calls() {
        let e = Expr::parse("tanh(u1)*sin(t)", 2).unwrap();
        assert!(e.depends_on_time());
        assert!(e.depends_on_state());
    }

    #[test]
    fn rejects_out_of_range_variable() {
        assert!(matches!(
            Expr::parse("u3", 2),
            Err(ExprError::IndexOutOfRange { index: 3, n: 2, .. })
        ));
    }

    #[test]
    fn precedence_and_associativity() {
        let e = |s: &str| Expr::parse(s, 1).unwrap().eval(0.0, &[0.0]).unwrap();
        assert_eq!(e("-2^2"), -4.0);
        assert_eq!(e("2^3^2"), 512.0);
        assert_eq!(e("2^-1"), 0.5);
        assert_eq!(e("1-2-3"), -4.0);
        assert_eq!(e("8/4/2"), 1.0);
        assert_eq!(e("2*3+4*5"), 26.0);
        assert_eq!(e("--3"), 3.0);
        assert_eq!(e("1.5e2"), 150.0);
    }

    #[test]
    fn evaluates_reference_values() {
        let e = Expr::parse("0.5*tanh(u1)", 2).unwrap();
        let v = e.eval(0.0, &[1.0, 0.0]).unwrap();
        // 0.5 * tanh(1) from the exponential definition
        let oracle = 0.5 * (1.0 - (-2.0f64).exp()) / (1.0 + (-2.0f64).exp());
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.3807970780).abs() < 1e-10);
        let s = Expr::parse("sin(t)", 2).unwrap();
        assert_eq!(s.eval(0.0, &[0.3, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn domain_errors_surface() {
        let check = |src: &str| {
            let e = Expr::parse(src, 2).unwrap();
            assert!(
                matches!(e.eval(0.0, &[0.0, 1.0]), Err(ExprError::EvalDomain { .. })),
                "{src}"
            );
        };
        check("1/u1");
        check("log(u1)");
        check("sqrt(-u2)");
        check("(-u2)^0.5");
        check("u1^(-1)");
        check("exp(1000)");
    }

    #[test]
    fn domain_error_reports_position() {
        let e = Expr::parse("u2 + 1/u1", 2).unwrap();
        assert_eq!(
            e.eval(0.0, &[0.0, 1.0]),
            Err(ExprError::EvalDomain {
                pos: 6,
                what: "division by zero"
            })
        );
    }

    #[test]
    fn gradient_examples() {
        let (_, g) = Expr::parse("0.5*tanh(u1)", 2)
            .unwrap()
            .diff(0.0, &[0.0, 7.0])
            .unwrap();
        assert_eq!(g, vec![0.5, 0.0]);
        let (v, g) = Expr::parse("u1*u2", 2).unwrap().diff(0.0, &[3.0, 4.0]).unwrap();
        assert_eq!(v, 12.0);
        assert_eq!(g, vec![4.0, 3.0]);
        let tanh1 = Expr::parse("tanh(u1)", 2).unwrap();
        let (_, g) = tanh1.diff(0.0, &[1.0, 0.0]).unwrap();
        let h = 1e-6;
        let fd = ((1.0f64 + h).tanh() - (1.0f64 - h).tanh()) / (2.0 * h);
        assert!((g[0] - fd).abs() <= 1e-8);
        assert!((g[0] - 0.4199743416).abs() <= 1e-10);
    }

    #[test]
    fn non_differentiable_points() {
        let e = Expr::parse("abs(u1)", 1).unwrap();
        assert!(matches!(
            e.diff(0.0, &[0.0]),
            Err(ExprError::NotDifferentiable { .. })
        ));
        assert_eq!(e.diff(0.0, &[-2.0]).unwrap().1, vec![-1.0]);
        let s = Expr::parse("sqrt(u1)", 1).unwrap();
        assert!(matches!(
            s.diff(0.0, &[0.0]),
            Err(ExprError::NotDifferentiable { .. })
        ));
        let c = Expr::parse("abs(t)", 1).unwrap();
        assert_eq!(c.diff(0.0, &[1.0]).unwrap().1, vec![0.0]);
    }

    #[test]
    fn constants_substitute() {
        let mut c = BTreeMap::new();
        c.insert("eps".to_string(), 0.6);
        let e = Expr::parse_with("eps*(-u2)", 2, &c).unwrap();
        assert_eq!(e, Expr::parse("0.6*(-u2)", 2).unwrap());
        assert!(matches!(
            Expr::parse("eps*u1", 2),
            Err(ExprError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let corpus = [
            "", "(", ")", "1+", "*2", "u", "u0", "u1u2", "sin", "sin(", "sin()", "sin u1",
            "1..2", "1e", "((u1)", "u1)", "2^", "foo(u1)", "1 2", "+1", "u1 +* u2", "#",
            "t(", "abs(1,2)", ".", "--", "1e+", "u-1", "ä",
        ];
        for s in corpus {
            assert!(Expr::parse(s, 2).is_err(), "accepted `{s}`");
        }
    }

    fn arb_expr(depth: u32) -> BoxedStrategy<String> {
        let leaf = prop_oneof![
            (0.1f64..3.0).prop_map(|v| format!("{v}")),
            Just("t".to_string()),
            Just("u1".to_string()),
            Just("u2".to_string()),
            Just("u3".to_string()),
        ];
        leaf.prop_recursive(depth, 32, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}+{b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}-{b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}*{b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})/(2+sin({b}))")),
                inner.clone().prop_map(|a| format!("-({a})")),
                inner.clone().prop_map(|a| format!("sin({a})")),
                inner.clone().prop_map(|a| format!("cos({a})")),
                inner.clone().prop_map(|a| format!("tanh({a})")),
                inner.clone().prop_map(|a| format!("exp(0.1*tanh({a}))")),
                inner.clone().prop_map(|a| format!("log(2+cos({a}))")),
                inner.clone().prop_map(|a| format!("sqrt(1+({a})^2)")),
                inner.clone().prop_map(|a| format!("({a})^3")),
                inner.clone().prop_map(|a| format!("(1.5+tanh({a}))^0.7")),
            ]
        })
        .boxed()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gradient_matches_central_differences(
            src in arb_expr(4),
            t in -2.0f64..2.0,
            u in proptest::collection::vec(-1.5f64..1.5, 3),
        ) {
            let e = Expr::parse(&src, 3).unwrap();
            let Ok((_, grad)) = e.diff(t, &u) else { return Ok(()); };
            let h = 1e-6;
            for j in 0..3 {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[j] += h;
                dn[j] -= h;
                let (Ok(a), Ok(b)) = (e.eval(t, &up), e.eval(t, &dn)) else { continue };
                let fd = (a - b) / (2.0 * h);
                prop_assert!((grad[j] - fd).abs() <= 1e-6 * (1.0 + grad[j].abs()),
                    "{src}: grad {} fd {}", grad[j], fd);
            }
        }

        #[test]
        fn printing_round_trips(
            src in arb_expr(4),
            t in -2.0f64..2.0,
            u in proptest::collection::vec(-1.5f64..1.5, 3),
        ) {
            let e = Expr::parse(&src, 3).unwrap();
            let printed = e.to_string();
            let back = Expr::parse(&printed, 3).unwrap();
            prop_assert_eq!(&back, &e);
            match (e.eval(t, &u), back.eval(t, &u)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn parser_never_panics(s in "[-+*/^()., a-z0-9]{0,24}") {
            let _ = Expr::parse(&s, 3);
        }
    }
}

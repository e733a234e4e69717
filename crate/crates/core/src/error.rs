use thiserror::Error;

use crate::expr::ExprError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("malformed expression `{name}`: {source}")]
    MalformedExpression {
        name: String,
        #[source]
        source: ExprError,
    },
    #[error("f({t}, 0) has norm {norm:e}, expected 0")]
    ZeroConditionViolated { t: f64, norm: f64 },
    #[error("A({t}) has nonzero off-diagonal block entry A{i}{j} = {value:e}")]
    NonBlockDiagonal { t: f64, i: usize, j: usize, value: f64 },
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error("fundamental matrix of the {block} block has condition number {cond:e} at t = {t}")]
    IllConditioned { block: &'static str, t: f64, cond: f64 },
    #[error("time {t} outside the integrated window [{lo}, {hi}]")]
    OutOfWindow { t: f64, lo: f64, hi: f64 },
    #[error("norm supremum attained at the window boundary t = {t}")]
    TruncationSuspect { t: f64 },
    #[error("exponents do not split the linear process: {which} evidence grows from {early:.6e} to {late:.6e}")]
    NotSplit {
        which: &'static str,
        early: f64,
        late: f64,
    },
    #[error("gap condition fails: minimal contraction factor {theta} >= 1")]
    GapFails { theta: f64 },
    #[error("scalar iteration for {what} did not converge")]
    NoConvergence { what: &'static str },
    #[error("observed contraction ratio {ratio} exceeds {limit} at iteration {iteration}")]
    NonContraction {
        ratio: f64,
        limit: f64,
        iteration: usize,
    },
    #[error("fixed-point iteration hit the limit of {0} sweeps")]
    IterationLimit(usize),
    #[error("truncation tail bound {bound:e} exceeds {tol:e}; enlarge t_window")]
    TailTooLarge { bound: f64, tol: f64 },
    #[error("state norm {norm:e} exceeded the overflow guard at t = {t}")]
    Overflow { t: f64, norm: f64 },
    #[error("Duhamel residual {residual:e} at t = {t} exceeds {limit:e}")]
    DuhamelMismatch { t: f64, residual: f64, limit: f64 },
    #[error("evaluation failed at t = {t}: {source}")]
    Eval {
        t: f64,
        #[source]
        source: ExprError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the mathematical hypotheses rather than of input or numerics.
    pub fn is_mathematical(&self) -> bool {
        matches!(self, Error::GapFails { .. } | Error::NotSplit { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedExpression { .. } => "MalformedExpression",
            Error::ZeroConditionViolated { .. } => "ZeroConditionViolated",
            Error::NonBlockDiagonal { .. } => "NonBlockDiagonal",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::IllConditioned { .. } => "IllConditioned",
            Error::OutOfWindow { .. } => "OutOfWindow",
            Error::TruncationSuspect { .. } => "TruncationSuspect",
            Error::NotSplit { .. } => "NotSplit",
            Error::GapFails { .. } => "GapFails",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::NonContraction { .. } => "NonContraction",
            Error::IterationLimit(_) => "IterationLimit",
            Error::TailTooLarge { .. } => "TailTooLarge",
            Error::Overflow { .. } => "Overflow",
            Error::DuhamelMismatch { .. } => "DuhamelMismatch",
            Error::Eval { .. } => "EvalDomainError",
        }
    }
}

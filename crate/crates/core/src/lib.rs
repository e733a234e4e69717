//! Lyapunov–Perron computation of invariant, inertial and stable manifolds of
//! `u′ = A(t)u + f(t,u)` with an exponential splitting of the linear part.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::redundant_guards,
    clippy::too_many_arguments
)]

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod gap;
pub mod io;
pub mod linear;
pub mod problem;
pub mod solver;
pub mod systems;
pub mod verify;

pub use error::{Error, Result};

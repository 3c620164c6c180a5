//! Monte Carlo solver and diagnostics for whole-space second-order elliptic
//! equations with a potential term. The solution is represented as a time
//! integral of a discounted expectation along paths of the underlying
//! diffusion, so everything here is built on top of path simulation:
//! an expression language for coefficients, deterministic counter-based
//! noise streams, ergodic-average and log-moment diagnostics, regime
//! classification, the path-integral solver itself, and a finite-difference
//! cross-check for one-dimensional problems.

pub mod classify;
pub mod ergodics;
pub mod error;
pub mod expr;
pub mod lmgf;
pub mod sde;
pub mod solver;
pub mod stats;
pub mod stream;

pub use error::{Error, EvalError, Result};

//! Numerical laboratory for a planar hybrid system that switches at Poisson
//! times between two linear vector fields, `u0` pulling toward `(0, 0)` and
//! `u1` pulling toward `(1, 1)`, with a common diagonalizable linear part
//! `diag(-alpha, -beta)`, `alpha > beta > 0`.
//!
//! The crate provides exact flow evaluation and path simulation, the support
//! geometry of the invariant measure (a lens bounded by two power curves),
//! deterministic fixed-point solvers for the invariant distribution, and
//! diagnostics that measure corner/boundary mass-scaling exponents and
//! pathwise contraction.

pub mod analysis;
pub mod core;
pub mod geometry;
pub mod grid;
pub mod reduction;
pub mod simulate;
pub mod solver;

pub use crate::core::{HybridState, Point, Regime, SwitchingParams, TimeVector};

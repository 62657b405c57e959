//! Desk-scale solver for two-phase incompressible flow with a
//! Cahn–Hilliard–Oono phase field coupled to Stokes flow, plus the
//! machinery for the associated tracking-type optimal control problem:
//! linearized (sensitivity) and adjoint sweeps, gradient assembly,
//! projected gradient descent under box constraints, and a verification
//! harness (energy law, mean decay, Taylor/duality/gradient checks).
//!
//! Layout
//! * [`grid`] — MAC staggering and the two field types.
//! * [`operators`] — discrete gradient/divergence/Laplacians, advection,
//!   surface tension, quadratures, double-well potential.
//! * [`linsolve`] — matrix-free CG for the per-step SPD systems.
//! * [`state`] — forward solver and diagnostics.
//! * [`linearized`] — sensitivity system around a stored trajectory.
//! * [`adjoint`] — backward adjoint sweep.
//! * [`control`] — cost, gradient, box projection, optimizer, Taylor test.
//! * [`cli_io`] — config parsing, field/CSV files, CLI entry points.
//! * [`rng`] — the single seeded generator behind every random field.

pub mod adjoint;
pub mod cli_io;
pub mod control;
pub mod error;
pub mod grid;
pub mod linearized;
pub mod linsolve;
pub mod operators;
pub mod rng;
pub mod state;

pub use error::{Error, Result};

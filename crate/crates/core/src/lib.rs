//! Numerical optimal control for backward stochastic evolution equations.
//!
//! The controlled state `(y, z)` solves a linear backward equation
//! `dy = [A y + B z + D u + G] dt + z dW`, `y(T) = xi`, on a finite-dimensional
//! Gelfand triple. The optimal control is read off the solution of the fully
//! coupled forward-backward Hamiltonian system, which is solved by a method of
//! continuation: starting from a decoupled system, a coupling weight `rho` is
//! raised to one in steps, each step a contraction fixed point.
//!
//! Module map:
//! - [`gelfand`]: mass/norm matrices, coefficient families, adjoints, coercivity.
//! - [`lattice`]: time grid, binary Brownian event tree, adapted processes.
//! - [`evolution`]: backward (state) and forward (adjoint) one-equation solvers.
//! - [`hamiltonian`]: integrands, minimizer map, assumption validators.
//! - [`continuation`]: auxiliary system, the fixed-point map, stage solver.
//! - [`control`]: problem bundle, cost, optimality checks, dense oracle.
//! - [`parabolic`]: finite-difference Dirichlet front-end.
//! - [`config`], [`expr`], [`runner`]: experiment runner behind the CLI.

pub mod config;
pub mod continuation;
pub mod control;
pub mod error;
pub mod evolution;
pub mod expr;
pub mod gelfand;
pub mod hamiltonian;
pub mod lattice;
pub mod parabolic;
pub mod report;
pub mod runner;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};

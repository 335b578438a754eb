//! Solvers and simulators for the archetypal functional equation
//! `y(x) = E{y(alpha (x - beta))}`.

pub mod chain;
pub mod cli;
pub mod lattice;
pub mod laws;
pub mod pantograph;
pub mod rng;
pub mod solver;
pub mod stats;
pub mod supercritical;

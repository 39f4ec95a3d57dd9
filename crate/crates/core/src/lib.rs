//! Numerical laboratory for ergodic BSDEs over a random horizon and the
//! forward utilities they represent.
//!
//! The stochastic factor is a dissipative one-dimensional diffusion; its
//! discrete return time past a minimal horizon supplies both a terminal
//! condition and a horizon, which makes three solution schemes possible:
//! Monte Carlo estimators of the ergodic cost ([`ergodic_cost`]), a
//! least-squares backward scheme and two neural forward solvers
//! ([`solvers`]). Solutions feed the utility surfaces and optimal
//! strategies in [`utilities`]; [`metrics`] reproduces the benchmark tables
//! and error studies.

pub mod config;
pub mod csvio;
pub mod drivers;
pub mod ergodic_cost;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod quad;
pub mod rng;
pub mod sde;
pub mod solvers;
pub mod utilities;

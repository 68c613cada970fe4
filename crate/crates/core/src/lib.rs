//! Pricing and hedging engine for high-dimensional American options.
//!
//! The core method trains one small feedforward network per exercise date,
//! stacked recursively backwards from expiry, by minimizing the
//! least-squares residual of the discretized backward SDE that couples an
//! option's price to its delta along simulated paths.  The result is a model
//! of price *and* delta over the whole spacetime, usable for exercise
//! decisions and discrete delta hedging.
//!
//! Module map:
//!
//! - [`market`] — market/contract parameters, payoffs, smoothed payoffs;
//! - [`simulate`] — Cholesky factorization and Euler path generation;
//! - [`netcore`] — the per-timestep networks, the recursive value stack and
//!   its differentiation kernel (values, input-gradients, and parameter
//!   gradients of losses containing input-gradients), checkpointing;
//! - [`training`] — the backward sweep: schedules, Adam, value targets,
//!   ensemble training, exercise classification;
//! - [`lsm`] — Longstaff–Schwartz regression baseline;
//! - [`fdoracle`] — 1-D Crank–Nicolson American solver (exact-solution
//!   oracle via the geometric-average reduction) and Black–Scholes forms;
//! - [`hedging`] — stopping times, t=0 estimators, delta-hedging simulator;
//! - [`metrics`] — error metrics, boundary f1, bias diagnostic;
//! - [`rng`] / [`parallel`] — deterministic noise indexing and
//!   thread-count-independent execution helpers.

/// Crate version, recorded in run manifests for reproducibility.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod checkpoint;
pub mod fdoracle;
pub mod hedging;
pub mod lsm;
pub mod market;
pub mod metrics;
pub mod netcore;
pub mod parallel;
pub mod rng;
pub mod simulate;
pub mod training;

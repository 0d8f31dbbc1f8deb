//! Nonmyopic adaptive Gaussian-process planning over Lipschitz continuous rewards.
//!
//! The crate is organised bottom-up:
//!
//! * [`gp`] : squared-exponential GP prior/posterior with an incrementally
//!   extended Cholesky factor, plus field realisations.
//! * [`reward`] : the `R₁ + R₂ + R₃` reward class, its Gaussian convolutions
//!   and Lipschitz constants.
//! * [`sampling`] : deterministic partitions of a Gaussian predictive
//!   distribution and the `Λ(n, τ)` error coefficient.
//! * [`lipschitz`] : value-function Lipschitz constants over every reachable
//!   path, computed before planning.
//! * [`epsilon`] : the exact ε-optimal planner, and [`oracle`] with the dense
//!   quadrature reference recursions used to check it.
//! * [`anytime`] : the branch-and-bound anytime planner.
//! * [`harness`] : fields, episodes, baselines and metrics.
//! * [`config`] / [`verify`] : experiment configuration and the oracle smoke
//!   suite behind the CLI.

pub mod anytime;
pub mod config;
pub mod epsilon;
pub mod error;
pub mod gp;
pub mod harness;
pub mod lipschitz;
pub mod normal;
pub mod oracle;
pub mod quadrature;
pub mod reward;
pub mod sampling;
pub mod verify;

pub use error::{GppError, Result};

//! Kernel-restricted universal-least-favorable density flow for debiased
//! plug-in estimation of causal effect parameters (ATE, risk ratio, odds
//! ratio) from one fitted distribution, with baseline estimators and a
//! seeded Monte Carlo harness.

pub mod baselines;
pub mod cli;
pub mod density;
pub mod error;
pub mod flow;
pub mod kernel;
pub mod nuisance;
pub mod sims;
pub mod stopping;
pub mod targets;

pub use error::{Error, Result};

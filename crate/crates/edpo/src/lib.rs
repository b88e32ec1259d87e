//! Desk-scale preference-optimization laboratory.
//!
//! Implements DPO with instance-level adaptive KL penalty control driven by
//! logit monotonicity under perturbation of the penalty coefficient, together
//! with DPO / TR-DPO / batch-level adaptive-beta baselines, exact tabular
//! oracles for the closed-form optimal policy, synthetic Bradley-Terry
//! preference data, and an evaluation harness (forward KL, win rate, Pareto
//! frontiers, epsilon-sensitivity sweeps).
//!
//! Everything runs on small enumerable tasks so that every estimate in the
//! training path can be checked against an exact oracle.

pub mod baselines;
pub mod config;
pub mod dpo;
pub mod epsilon;
pub mod eval;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod trainer;

mod error;

pub use error::{Error, Result};

//! Model extraction against multi-exit (early-exit) classifiers.
//!
//! The crate covers the whole attacker/victim laboratory:
//!
//! - [`numerics`]: dense `f64` tensors and a reverse-mode gradient tape.
//! - [`multiexit`]: backbone + exit-head networks, cascaded inference, FLOPs accounting.
//! - [`victimlab`]: victim training and a black-box deployment with simulated timing.
//! - [`changepoint`]: offline Bayesian changepoint detection over sorted runtimes.
//! - [`attack`]: query-set construction, exit estimation and substitute training.
//! - [`search`]: output-strategy search over calibration confidences.
//! - [`metrics`]: accuracy, closeness and computation-cost reports.

pub mod attack;
pub mod changepoint;
pub mod data;
mod error;
pub mod metrics;
pub mod multiexit;
pub mod numerics;
pub mod search;
pub mod victimlab;

pub use error::{Error, Result};

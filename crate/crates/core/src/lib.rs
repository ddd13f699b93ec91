//! Federated optimization simulator built around fractional-order SGD.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — Gamma function, learning-rate schedule, the fractional
//!   step-size factor, and labeled deterministic RNG streams.
//! * [`objectives`] — differentiable objectives (quadratic, linear/logistic
//!   regression, a small tanh MLP) with hand-derived gradients and a
//!   finite-difference checker.
//! * [`optimizers`] — centralized SGD and fractional-order SGD steppers.
//! * [`partition`] — datasets, synthetic data, IDX ingestion, and the
//!   IID/Dirichlet/shard client partitioners.
//! * [`federation`] — the FedAvg/FOFedAvg round engine with byte-accurate
//!   communication metering.
//! * [`analysis`] — post-hoc convergence and bias diagnostics.

pub mod analysis;
pub mod error;
pub mod federation;
pub mod numerics;
pub mod objectives;
pub mod optimizers;
pub mod partition;

pub use error::{Error, Result};

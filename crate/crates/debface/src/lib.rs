//! Desk-scale adversarial disentanglement of identity and demographic
//! face representations, with a controllable synthetic data generator
//! and a cohort-fairness evaluation harness.
//!
//! The crate is organized around the experiment pipeline:
//!
//! * [`synthgen`] — deterministic synthetic datasets with tunable cohort
//!   imbalance and per-attribute pixel signals.
//! * [`netcore`] — parameter containers and forward/backward passes for
//!   the shared encoder, attribute heads, distribution classifier, and
//!   the feature aggregator.
//! * [`losses`] — AM-Softmax, uniform-target adversarial loss,
//!   shuffle-product construction, factorization loss, batch-hard
//!   triplet loss, and the weighted joint objective.
//! * [`trainloop`] — SGD training with per-term gradient routing.
//! * [`evalkit`] — cohort ROC/AUC, biasness, leakage probes,
//!   cross-demographic false-accept and imposter-percentile analysis.
//! * [`cli`] — `generate`/`train`/`evaluate`/`report` commands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod netcore;
pub mod nn;
pub mod report;
pub mod rng;
pub mod synthgen;
pub mod trainloop;

pub use error::{DebfaceError, Result};

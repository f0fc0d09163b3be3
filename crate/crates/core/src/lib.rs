//! A desk-scale laboratory for training-time backdoor attacks and defenses.
//!
//! The crate poisons small image datasets with pixel-space triggers, trains
//! compact feedforward classifiers, isolates suspected backdoor examples by
//! trapping per-example losses during early training, and unlearns the
//! backdoor with gradient ascent on the isolated subset — while measuring
//! attack success rate, clean accuracy, and isolation precision.
//!
//! Module map:
//!
//! - [`nn`]: the deterministic gradient engine (forward, weighted backward,
//!   SGD with momentum).
//! - [`data`]: datasets, the synthetic clean task, and IDX files.
//! - [`attacks`]: trigger injectors and the poisoning engine.
//! - [`abl`]: loss-trapped training, isolation, gradient-ascent unlearning,
//!   and the three-phase pipeline.
//! - [`baselines`]: alternative isolation and unlearning arms.
//! - [`metrics`]: attack success rate, clean accuracy, precision, curves.
//! - [`rng`]: the documented deterministic generator behind everything.
//!
//! Every run is a pure function of its seeds: same seed, same data, same
//! configuration yield bit-identical trained parameters and reports.

pub mod abl;
pub mod attacks;
pub mod baselines;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
mod util;

pub use error::{Error, Result};

//! Interpretable rule-ensemble estimation of heterogeneous treatment effects
//! (HTE) for multi-arm studies.
//!
//! The pipeline mirrors the estimation procedure end to end:
//!
//! 1. estimate generalized propensity scores ([`propensity`]),
//! 2. build inverse-probability-weighted transformed outcomes ([`transform`]),
//! 3. generate candidate rules with multi-target tree boosting ([`rulegen`]),
//! 4. assemble rules plus winsorized linear terms into an arm-masked grouped
//!    design ([`basis`]),
//! 5. fit the shared-basis model with (adaptive) group lasso ([`ensemble`]),
//! 6. predict per-arm outcomes, HTEs and pairwise contrasts, and report term
//!    and variable importances ([`model`]).
//!
//! [`simbench`] contains the synthetic-scenario generator, the four evaluation
//! metrics, subgroup evaluation and the benchmark harness; [`pipeline`] wires
//! the stages together behind a single configuration struct.

pub mod basis;
pub mod data;
pub mod ensemble;
mod error;
pub mod model;
pub mod pipeline;
pub mod propensity;
pub mod rulegen;
pub mod simbench;
pub mod transform;
mod util;

pub use error::{Error, Result};

//! Decoupled soft-target training for implicit-feedback recommenders.
//!
//! The crate is organised along the training pipeline:
//!
//! * [`dataio`] ingests interaction logs, filters them and builds leave-one-out splits.
//! * [`model`] holds two small full-softmax recommenders with analytic gradients and Adam.
//! * [`loss`] implements cross-entropy, label smoothing, the coupled soft-target loss,
//!   its target/non-target decomposition and the decoupled loss.
//! * [`softlabel`] generates soft targets (label propagation over k-means neighbourhoods,
//!   label smoothing, popularity prior).
//! * [`metrics`] evaluates full-catalog Recall@k / NDCG@k.
//! * [`train`] wires everything together into pretrain → soft targets → final training.
//! * [`report`] aggregates run reports into comparison tables.

pub mod dataio;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod report;
pub mod softlabel;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

//! Causal effect estimation from text.
//!
//! Documents are reduced to low-dimensional embeddings that preserve the
//! information predictive of treatment and outcome; the embeddings feed
//! propensity and outcome models whose predictions are plugged into
//! downstream ATT/NDE estimators. The crate also carries the semi-synthetic
//! benchmark machinery used to validate estimators against known effects.

pub mod atm;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod estimators;
pub mod pipeline;
pub mod seed;
pub mod simulate;
pub mod tensor;

pub use atm::{AtmConfig, AtmParams, OutcomeFamily, TrainMode};
pub use corpus::{BowCorpus, DocumentRecord, SparseCounts, Vocab};
pub use error::{Error, Result};
pub use estimators::{EffectEstimate, EstimatorKind, Nuisances};
pub use simulate::{SimConfig, SimulatedDataset};
pub use tensor::{Graph, Tensor, Var};

/// Version string written into every run manifest and checkpoint.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

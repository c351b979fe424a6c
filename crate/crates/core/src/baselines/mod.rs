//! Reference representations and nuisance models: bag-of-words, collapsed
//! Gibbs LDA and unsupervised-ATM features with downstream regressions, and
//! the supervised-only feedforward network.

mod features;
mod lda;
mod nn;
mod regression;

pub use features::{bow_features, one_hot_features, FeatureMatrix};
pub use lda::{lda_gibbs, lda_gibbs_with_audit, LdaConfig, LdaState};
pub use nn::train_supervised_nn;
pub use regression::{
    fit_downstream_nuisances, fit_linear, fit_logistic, DownstreamConfig, FitReport, LinearModel,
};

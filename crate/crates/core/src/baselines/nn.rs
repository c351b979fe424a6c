use crate::atm::{self, AtmConfig, TrainMode, TrainedModel};
use crate::corpus::{BowCorpus, FoldAssignment};
use crate::error::Result;
use crate::estimators::Nuisances;

/// Feedforward network with the topic model's encoder and heads, trained on
/// the treatment and outcome terms alone: `softmax(μ)` feeds the heads
/// directly, with no reconstruction or KL term.
///
/// With folds the nuisances are cross-fitted; otherwise they are in-sample.
pub fn train_supervised_nn(
    corpus: &BowCorpus,
    outcome: &[f64],
    config: &AtmConfig,
    folds: Option<&FoldAssignment>,
) -> Result<(Nuisances, Vec<TrainedModel>)> {
    let cfg = AtmConfig {
        mode: TrainMode::SupervisedOnly,
        ..config.clone()
    };
    match folds {
        Some(f) => atm::cross_fit(corpus, Some(outcome), &cfg, f),
        None => {
            let all: Vec<usize> = (0..corpus.len()).collect();
            let model = atm::train(corpus, &all, Some(outcome), &cfg)?;
            let nuis = atm::predict_nuisances(corpus, &all, &model.params, cfg.family)?;
            Ok((nuis, vec![model]))
        }
    }
}

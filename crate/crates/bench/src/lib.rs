//! Shared fixtures for the benchmarks.

use catm_core::simulate::{generate_synthetic_corpus, simulate_dataset, SyntheticCorpusConfig};
use catm_core::{seed, BowCorpus, Nuisances, SimConfig};
use rand::Rng;

/// Synthetic corpus with simulated treatments and outcomes attached.
pub fn labeled_corpus(docs: usize, vocab: usize) -> (BowCorpus, Vec<f64>) {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusConfig {
        docs,
        vocab,
        seed: 1,
        ..SyntheticCorpusConfig::default()
    })
    .expect("synthetic corpus");
    let sim = simulate_dataset(&corpus, &SimConfig::default()).expect("simulation");
    let corpus = corpus.with_labels(&sim.treatment, &sim.outcome).expect("labels");
    (corpus, sim.outcome)
}

/// Random treatments, outcomes and nuisances for `n` units.
pub fn random_units(n: usize) -> (Vec<u8>, Vec<f64>, Nuisances) {
    let mut rng = seed::rng(2);
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let t: Vec<u8> = g.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
    let q0: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let q1: Vec<f64> = q0.iter().map(|q| q + 1.0).collect();
    let y: Vec<f64> = (0..n).map(|i| if t[i] == 1 { q1[i] } else { q0[i] } + rng.random::<f64>()).collect();
    (t, y, Nuisances::new(g, q0, q1).expect("nuisances"))
}

//! Semi-synthetic outcome simulation with known ground truth, the
//! exogenous-confounding variant, and a fully synthetic corpus generator.
//!
//! Real text and a real confounder stratum are kept; only outcomes (and, in
//! the exogeneity sweep, treatments) are simulated. The true propensity of a
//! stratum is its treated fraction:
//!
//! ```text
//! continuous:  Y = t + b1 (π − 0.5) + ε,        ε ~ N(0, γ²)
//! binary:      Y ~ Bernoulli(σ(0.25 t + b1 (π − 0.2)))
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atm::OutcomeFamily;
use crate::corpus::{BowCorpus, BowDoc, SparseCounts, Vocab};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{logit, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Confounding strength.
    pub b1: f64,
    /// Noise standard deviation (continuous family).
    pub gamma: f64,
    pub family: OutcomeFamily,
    /// Exogeneity weight. `None` keeps the observed treatments; `Some(p)`
    /// redraws them from the mixed propensity.
    pub p: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            b1: 10.0,
            gamma: 1.0,
            family: OutcomeFamily::Continuous,
            p: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if let Some(p) = self.p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("p must lie in [0,1], got {p}")));
            }
        }
        if !self.b1.is_finite() {
            return Err(Error::Invalid("b1 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrataPropensity {
    pub by_stratum: BTreeMap<String, f64>,
    pub by_unit: Vec<f64>,
    /// Strata whose treated fraction is 0 or 1.
    pub degenerate: Vec<String>,
}

/// Treated fraction within each stratum, broadcast back to units.
pub fn strata_propensity<S: AsRef<str>>(strata: &[S], t: &[u8]) -> Result<StrataPropensity> {
    if strata.len() != t.len() {
        return Err(Error::shape("strata_propensity", format!("{} strata, {} treatments", strata.len(), t.len())));
    }
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (s, &ti) in strata.iter().zip(t) {
        let e = acc.entry(s.as_ref().to_owned()).or_default();
        e.0 += usize::from(ti == 1);
        e.1 += 1;
    }
    let by_stratum: BTreeMap<String, f64> =
        acc.into_iter().map(|(s, (k, n))| (s, k as f64 / n as f64)).collect();
    let degenerate: Vec<String> = by_stratum
        .iter()
        .filter(|(_, &p)| p == 0.0 || p == 1.0)
        .map(|(s, _)| s.clone())
        .collect();
    for s in &degenerate {
        log::warn!("degenerate stratum `{s}`: propensity {} breaks overlap", by_stratum[s]);
    }
    let by_unit = strata.iter().map(|s| by_stratum[s.as_ref()]).collect();
    Ok(StrataPropensity {
        by_stratum,
        by_unit,
        degenerate,
    })
}

/// Success probability of the binary outcome model.
pub fn binary_outcome_prob(t: u8, pi: f64, b1: f64) -> f64 {
    sigmoid(0.25 * f64::from(t) + b1 * (pi - 0.2))
}

/// Draws outcomes from the family's model.
pub fn simulate_outcome<R: Rng + ?Sized>(t: &[u8], pi: &[f64], config: &SimConfig, rng: &mut R) -> Result<Vec<f64>> {
    config.validate()?;
    if t.len() != pi.len() {
        return Err(Error::shape("simulate_outcome", "treatment and propensity lengths differ"));
    }
    if let Some(p) = pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("propensity {p} outside [0,1]")));
    }
    Ok(t.iter()
        .zip(pi)
        .map(|(&ti, &p)| match config.family {
            OutcomeFamily::Continuous => {
                let eps: f64 = rng.sample(StandardNormal);
                f64::from(ti) + config.b1 * (p - 0.5) + config.gamma * eps
            }
            OutcomeFamily::Binary => {
                let prob = binary_outcome_prob(ti, p, config.b1);
                if rng.random::<f64>() < prob {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect())
}

/// Exact effect on the treated under the simulation model.
pub fn ground_truth_effect(t: &[u8], pi: &[f64], config: &SimConfig) -> Result<f64> {
    if t.len() != pi.len() {
        return Err(Error::shape("ground_truth_effect", "treatment and propensity lengths differ"));
    }
    let treated: Vec<f64> = t.iter().zip(pi).filter(|(&ti, _)| ti == 1).map(|(_, &p)| p).collect();
    if treated.is_empty() {
        return Err(Error::EmptyArm(1));
    }
    Ok(match config.family {
        OutcomeFamily::Continuous => 1.0,
        OutcomeFamily::Binary => {
            treated
                .iter()
                .map(|&p| binary_outcome_prob(1, p, config.b1) - binary_outcome_prob(0, p, config.b1))
                .sum::<f64>()
                / treated.len() as f64
        }
    })
}

/// `logit g_sim = (1 − p) logit ĝ + p ξ` for given `ξ`.
pub fn mix_exogenous(g_hat: &[f64], p: f64, xi: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("p must lie in [0,1], got {p}")));
    }
    if g_hat.len() != xi.len() {
        return Err(Error::shape("mix_exogenous", "propensity and noise lengths differ"));
    }
    g_hat
        .iter()
        .zip(xi)
        .map(|(&g, &x)| {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Invalid(format!("propensity {g} has infinite logit")));
            }
            if p == 0.0 {
                return Ok(g);
            }
            Ok(sigmoid((1.0 - p) * logit(g) + p * x))
        })
        .collect()
}

/// Mixes inferrable propensities with exogenous noise and redraws treatment.
pub fn simulate_exogenous_treatment(g_hat: &[f64], p: f64, seed: u64) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut rng = seed::rng(seed);
    let xi: Vec<f64> = (0..g_hat.len()).map(|_| rng.sample(StandardNormal)).collect();
    let g_sim = mix_exogenous(g_hat, p, &xi)?;
    let t = g_sim.iter().map(|&g| u8::from(rng.random::<f64>() < g)).collect();
    Ok((g_sim, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
    /// Propensity that drove the outcome for each unit.
    pub pi: Vec<f64>,
    pub psi_true: f64,
    pub config: SimConfig,
}

/// Simulates outcomes (and, if `config.p` is set, treatments) for a corpus
/// whose documents carry strata labels.
pub fn simulate_dataset(corpus: &BowCorpus, config: &SimConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let strata = corpus
        .strata()
        .ok_or_else(|| Error::Invalid("simulation needs a stratum label on every document".into()))?;
    let observed_t = corpus.treatments();
    let sp = strata_propensity(&strata, &observed_t)?;
    let (treatment, pi) = match config.p {
        None => (observed_t, sp.by_unit),
        Some(p) => {
            let (g_sim, t) =
                simulate_exogenous_treatment(&sp.by_unit, p, seed::derive_named(config.seed, "exogenous"))?;
            (t, g_sim)
        }
    };
    let mut rng = seed::rng(seed::derive_named(config.seed, "outcome"));
    let outcome = simulate_outcome(&treatment, &pi, config, &mut rng)?;
    let psi_true = ground_truth_effect(&treatment, &pi, config)?;
    Ok(SimulatedDataset {
        treatment,
        outcome,
        pi,
        psi_true,
        config: config.clone(),
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a SimConfig,
    psi_true: f64,
    units: Vec<SidecarUnit<'a>>,
}

#[derive(Serialize)]
struct SidecarUnit<'a> {
    id: &'a str,
    pi_true: f64,
}

/// Writes `psi_true` and per-unit `pi_true` as JSON next to the records.
pub fn write_sidecar(path: &Path, corpus: &BowCorpus, sim: &SimulatedDataset) -> Result<()> {
    let side = Sidecar {
        config: &sim.config,
        psi_true: sim.psi_true,
        units: corpus
            .docs()
            .iter()
            .zip(&sim.pi)
            .map(|(d, &pi_true)| SidecarUnit { id: &d.id, pi_true })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&side)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub topics: usize,
    pub vocab: usize,
    pub docs: usize,
    pub doc_len: usize,
    /// Dirichlet concentration is `1 / sharpness`; infinity gives one-hot
    /// topic proportions.
    pub sharpness: f64,
    /// Mass each topic spreads uniformly over the whole vocabulary; the rest
    /// stays on the topic's own block.
    pub beta_noise: f64,
    /// Treatment probability for each stratum (argmax topic).
    pub propensity: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            topics: 5,
            vocab: 200,
            docs: 2000,
            doc_len: 60,
            sharpness: 100.0,
            beta_noise: 0.1,
            propensity: vec![0.2, 0.35, 0.5, 0.65, 0.8],
            seed: 0,
        }
    }
}

/// Topic-word distributions: block-diagonal plus uniform noise.
pub fn block_topics(topics: usize, vocab: usize, noise: f64) -> Vec<Vec<f64>> {
    (0..topics)
        .map(|k| {
            let lo = k * vocab / topics;
            let hi = (k + 1) * vocab / topics;
            (0..vocab)
                .map(|v| {
                    let block = if (lo..hi).contains(&v) { (1.0 - noise) / (hi - lo) as f64 } else { 0.0 };
                    block + noise / vocab as f64
                })
                .collect()
        })
        .collect()
}

fn draw_theta<R: Rng + ?Sized>(k: usize, sharpness: f64, rng: &mut R) -> Result<Vec<f64>> {
    let one_hot = |rng: &mut R| {
        let mut v = vec![0.0; k];
        v[rng.random_range(0..k)] = 1.0;
        v
    };
    if sharpness.is_infinite() {
        return Ok(one_hot(rng));
    }
    let gamma = Gamma::new(1.0 / sharpness, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        // every component underflowed: the one-hot limit
        return Ok(one_hot(rng));
    }
    v.iter_mut().for_each(|x| *x /= s);
    Ok(v)
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Fully synthetic corpus whose stratum is each document's dominant topic
/// and whose treatment depends on the stratum only.
pub fn generate_synthetic_corpus(config: &SyntheticCorpusConfig) -> Result<BowCorpus> {
    let SyntheticCorpusConfig {
        topics: k,
        vocab: v,
        docs: n,
        doc_len,
        sharpness,
        beta_noise,
        ref propensity,
        seed,
    } = *config;
    if k == 0 || v == 0 || n == 0 {
        return Err(Error::Invalid("topics, vocab and docs must be positive".into()));
    }
    if v < k {
        return Err(Error::Invalid("vocabulary smaller than topic count".into()));
    }
    if propensity.len() != k || propensity.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Invalid(format!("need {k} stratum propensities in [0,1]")));
    }
    if !(sharpness > 0.0) || !(0.0..=1.0).contains(&beta_noise) {
        return Err(Error::Invalid("sharpness must be positive, beta_noise in [0,1]".into()));
    }
    let beta = block_topics(k, v, beta_noise);
    let vocab = Vocab::from_tokens((0..v).map(|i| format!("w{i:04}")).collect())?;
    let mut rng = seed::rng(seed);
    let mut docs = Vec::with_capacity(n);
    let width = n.to_string().len();
    for i in 0..n {
        let theta = draw_theta(k, sharpness, &mut rng)?;
        let word_probs: Vec<f64> = (0..v).map(|w| (0..k).map(|j| theta[j] * beta[j][w]).sum()).collect();
        let mut counts = vec![0u32; v];
        for _ in 0..doc_len {
            counts[categorical(&word_probs, &mut rng)] += 1;
        }
        let stratum = theta
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &x)| if x > best.1 { (j, x) } else { best })
            .0;
        let treatment = u8::from(rng.random::<f64>() < propensity[stratum]);
        docs.push(BowDoc {
            id: format!("d{i:0width$}"),
            counts: SparseCounts::from_pairs(
                counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(w, &c)| (w as u32, c)).collect(),
            ),
            treatment,
            outcome: None,
            strata: Some(format!("s{stratum}")),
        });
    }
    BowCorpus::new(docs, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cont(b1: f64, gamma: f64) -> SimConfig {
        SimConfig {
            b1,
            gamma,
            ..SimConfig::default()
        }
    }

    #[test]
    fn strata_fractions() {
        let sp = strata_propensity(&["A", "A", "A", "A"], &[1, 1, 0, 1]).unwrap();
        assert_eq!(sp.by_stratum["A"], 0.75);
        assert!(sp.degenerate.is_empty());

        let sp = strata_propensity(&["A", "A", "B"], &[1, 1, 0]).unwrap();
        assert_eq!(sp.by_unit, vec![1.0, 1.0, 0.0]);
        assert_eq!(sp.degenerate, vec!["A".to_string(), "B".to_string()]);

        let sp = strata_propensity(&["x", "x", "y", "y"], &[1, 0, 0, 0]).unwrap();
        assert_eq!(sp.by_stratum["x"], 0.5);
        assert_eq!(sp.by_stratum["y"], 0.0);
        assert_eq!(sp.degenerate, vec!["y".to_string()]);
    }

    #[test]
    fn noiseless_continuous_outcomes() {
        let mut rng = seed::rng(0);
        let y = simulate_outcome(&[1], &[0.5], &cont(37.0, 1e-300), &mut rng).unwrap();
        assert_eq!(y, vec![1.0]);
        let y = simulate_outcome(&[0], &[0.7], &cont(10.0, 1e-300), &mut rng).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-12);
        assert!(simulate_outcome(&[0], &[0.7], &cont(10.0, 0.0), &mut rng).is_err());
    }

    #[test]
    fn binary_probabilities() {
        assert!((binary_outcome_prob(1, 0.9, 0.0) - 0.562_176_500_885_798_6).abs() < 1e-15);
        assert_eq!(binary_outcome_prob(0, 0.9, 0.0), 0.5);
    }

    #[test]
    fn ground_truth_cases() {
        assert_eq!(ground_truth_effect(&[1, 0], &[0.3, 0.9], &cont(50.0, 2.0)).unwrap(), 1.0);
        let bin = |b1| SimConfig {
            b1,
            family: OutcomeFamily::Binary,
            ..SimConfig::default()
        };
        let psi0 = ground_truth_effect(&[1, 1, 0], &[0.1, 0.7, 0.4], &bin(0.0)).unwrap();
        assert!((psi0 - (sigmoid(0.25) - 0.5)).abs() < 1e-15);
        let near = ground_truth_effect(&[1], &[0.2], &bin(25.0)).unwrap();
        let far = ground_truth_effect(&[1], &[0.8], &bin(25.0)).unwrap();
        assert!((near - psi0).abs() < 1e-15);
        assert!(far < 1e-5);
        assert!(matches!(ground_truth_effect(&[0], &[0.5], &bin(1.0)), Err(Error::EmptyArm(1))));
    }

    #[test]
    fn exogenous_mixture_endpoints() {
        let g = [0.2, 0.5, 0.9];
        assert_eq!(mix_exogenous(&g, 0.0, &[3.0, -1.0, 0.4]).unwrap(), g.to_vec());
        let xi = [3.0, -1.0, 0.4];
        let full = mix_exogenous(&g, 1.0, &xi).unwrap();
        for (a, x) in full.iter().zip(xi) {
            assert!((a - sigmoid(x)).abs() < 1e-15);
        }
        let half = mix_exogenous(&[0.5], 0.5, &[2.0]).unwrap();
        assert!((half[0] - sigmoid(1.0)).abs() < 1e-15);
        assert!(mix_exogenous(&[1.0], 0.5, &[0.0]).is_err());
        assert!(mix_exogenous(&[0.5], 1.5, &[0.0]).is_err());

        let (g_sim, t) = simulate_exogenous_treatment(&g, 0.0, 4).unwrap();
        assert_eq!(g_sim, g.to_vec());
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn one_hot_corpus_stays_in_block() {
        let cfg = SyntheticCorpusConfig {
            topics: 4,
            vocab: 40,
            docs: 60,
            doc_len: 30,
            sharpness: f64::INFINITY,
            beta_noise: 0.0,
            propensity: vec![0.5; 4],
            seed: 1,
        };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        for d in c.docs() {
            let s: usize = d.strata.as_ref().unwrap()[1..].parse().unwrap();
            for &(w, _) in d.counts.entries() {
                assert_eq!(w as usize / 10, s);
            }
            assert_eq!(d.counts.total(), 30);
        }
        assert_eq!(generate_synthetic_corpus(&cfg).unwrap(), c);
    }
}

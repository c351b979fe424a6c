use rand::Rng;

use crate::corpus::BowCorpus;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LdaConfig {
    pub topics: usize,
    /// Document-topic smoothing; `None` means `1/K`.
    pub alpha: Option<f64>,
    /// Topic-word smoothing.
    pub eta0: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            topics: 32,
            alpha: None,
            eta0: 0.01,
            iterations: 500,
            burn_in: 250,
            seed: 0,
        }
    }
}

/// Collapsed Gibbs sampler state.
#[derive(Clone, Debug)]
pub struct LdaState {
    pub topics: usize,
    pub vocab: usize,
    pub alpha: f64,
    pub eta0: f64,
    /// Token occurrences as (doc, word), in corpus order.
    tokens: Vec<(usize, usize)>,
    /// Topic of each token occurrence.
    pub assignment: Vec<usize>,
    /// `[K×V]` topic-word counts.
    pub topic_word: Vec<u32>,
    /// `[n×K]` doc-topic counts.
    pub doc_topic: Vec<u32>,
    pub topic_total: Vec<u32>,
    doc_len: Vec<u32>,
}

impl LdaState {
    fn init<R: Rng + ?Sized>(corpus: &BowCorpus, k: usize, alpha: f64, eta0: f64, rng: &mut R) -> Self {
        let v = corpus.vocab().len();
        let n = corpus.len();
        let tokens: Vec<(usize, usize)> = corpus
            .docs()
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| doc.counts.tokens().map(move |w| (d, w)))
            .collect();
        let mut s = LdaState {
            topics: k,
            vocab: v,
            alpha,
            eta0,
            assignment: Vec::with_capacity(tokens.len()),
            topic_word: vec![0; k * v],
            doc_topic: vec![0; n * k],
            topic_total: vec![0; k],
            doc_len: vec![0; n],
            tokens,
        };
        for i in 0..s.tokens.len() {
            let (d, w) = s.tokens[i];
            let z = rng.random_range(0..k);
            s.assignment.push(z);
            s.topic_word[z * v + w] += 1;
            s.doc_topic[d * k + z] += 1;
            s.topic_total[z] += 1;
            s.doc_len[d] += 1;
        }
        s
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, weights: &mut [f64]) {
        let (k, v) = (self.topics, self.vocab);
        let v_eta = v as f64 * self.eta0;
        for i in 0..self.tokens.len() {
            let (d, w) = self.tokens[i];
            let old = self.assignment[i];
            self.topic_word[old * v + w] -= 1;
            self.doc_topic[d * k + old] -= 1;
            self.topic_total[old] -= 1;

            let mut total = 0.0;
            for (z, wt) in weights.iter_mut().enumerate() {
                *wt = (f64::from(self.doc_topic[d * k + z]) + self.alpha)
                    * (f64::from(self.topic_word[z * v + w]) + self.eta0)
                    / (f64::from(self.topic_total[z]) + v_eta);
                total += *wt;
            }
            let mut u = rng.random::<f64>() * total;
            let mut new = k - 1;
            for (z, &wt) in weights.iter().enumerate() {
                if u < wt {
                    new = z;
                    break;
                }
                u -= wt;
            }

            self.assignment[i] = new;
            self.topic_word[new * v + w] += 1;
            self.doc_topic[d * k + new] += 1;
            self.topic_total[new] += 1;
        }
    }

    /// Recomputes every count table from the assignments and compares.
    pub fn check_consistency(&self) -> Result<()> {
        let (k, v) = (self.topics, self.vocab);
        let mut tw = vec![0u32; k * v];
        let mut dt = vec![0u32; self.doc_len.len() * k];
        let mut tt = vec![0u32; k];
        for (&(d, w), &z) in self.tokens.iter().zip(&self.assignment) {
            tw[z * v + w] += 1;
            dt[d * k + z] += 1;
            tt[z] += 1;
        }
        if tw != self.topic_word || dt != self.doc_topic || tt != self.topic_total {
            return Err(Error::Invalid("LDA count tables disagree with assignments".into()));
        }
        for (d, &len) in self.doc_len.iter().enumerate() {
            let s: u32 = dt[d * k..(d + 1) * k].iter().sum();
            if s != len {
                return Err(Error::Invalid(format!("doc {d}: topic counts sum to {s}, length {len}")));
            }
        }
        if tt.iter().map(|&c| c as usize).sum::<usize>() != self.tokens.len() {
            return Err(Error::Invalid("topic totals disagree with token count".into()));
        }
        Ok(())
    }

    /// Smoothed topic proportions `(n_dk + α) / (n_d + Kα)` at the current state.
    fn proportions_into(&self, acc: &mut Tensor) {
        let k = self.topics;
        for d in 0..self.doc_len.len() {
            let denom = f64::from(self.doc_len[d]) + k as f64 * self.alpha;
            let row = acc.row_mut(d);
            for z in 0..k {
                row[z] += (f64::from(self.doc_topic[d * k + z]) + self.alpha) / denom;
            }
        }
    }
}

/// Runs collapsed Gibbs sampling and returns per-document topic proportions
/// `[n×K]`, averaged over the post-burn-in sweeps. `audit` is called with the
/// sweep index and state every 10 sweeps.
pub fn lda_gibbs_with_audit(
    corpus: &BowCorpus,
    config: &LdaConfig,
    mut audit: impl FnMut(usize, &LdaState),
) -> Result<Tensor> {
    let k = config.topics;
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("LDA needs at least one topic".into()));
    }
    if config.iterations <= config.burn_in {
        return Err(Error::Invalid(format!(
            "iterations ({}) must exceed burn-in ({})",
            config.iterations, config.burn_in
        )));
    }
    let alpha = config.alpha.unwrap_or(1.0 / k as f64);
    if !(alpha > 0.0 && config.eta0 > 0.0) {
        return Err(Error::Invalid("alpha and eta0 must be positive".into()));
    }
    let mut rng = seed::rng(config.seed);
    let mut state = LdaState::init(corpus, k, alpha, config.eta0, &mut rng);
    let mut weights = vec![0.0; k];
    let mut acc = Tensor::zeros(corpus.len(), k);
    for it in 0..config.iterations {
        state.sweep(&mut rng, &mut weights);
        if (it + 1) % 10 == 0 {
            audit(it + 1, &state);
        }
        if it >= config.burn_in {
            state.proportions_into(&mut acc);
        }
    }
    let samples = (config.iterations - config.burn_in) as f64;
    Ok(acc.map(|v| v / samples))
}

pub fn lda_gibbs(corpus: &BowCorpus, config: &LdaConfig) -> Result<Tensor> {
    lda_gibbs_with_audit(corpus, config, |_, _| {})
}

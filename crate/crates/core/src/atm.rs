//! Amortized logistic-normal topic model with propensity and outcome heads.
//!
//! A document's topic proportions are `θ = softmax(r)` with `r ~ N(0, I)`;
//! tokens are drawn from `Cat(θᵀβ)`. An encoder maps the normalized
//! bag-of-words to a diagonal Gaussian `q(r | w) = N(μ, diag σ²)`. The causal
//! variant adds a logit-linear propensity head and two linear outcome heads
//! (one per treatment arm) on `θ`, trained jointly with the ELBO so the
//! embedding keeps whatever predicts treatment and outcome.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BowCorpus, FoldAssignment, SparseCounts};
use crate::error::{Error, Result};
use crate::estimators::{open_unit, Nuisances};
use crate::seed;
use crate::tensor::{sigmoid, AdamConfig, AdamState, Graph, Tensor, Var};

/// Floor on the posterior standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    Continuous,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Negative ELBO plus treatment and outcome supervision.
    Causal,
    /// Negative ELBO only.
    Unsupervised,
    /// Supervision only on `softmax(μ)`; no reconstruction, no KL.
    SupervisedOnly,
}

/// Loss used by the outcome heads when outcomes are binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryOutcomeLoss {
    CrossEntropy,
    SquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmConfig {
    pub topics: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub mode: TrainMode,
    pub family: OutcomeFamily,
    pub binary_loss: BinaryOutcomeLoss,
    /// Multiplier on the treatment and outcome terms. 1 in normal use.
    pub supervision_weight: f64,
    pub seed: u64,
}

impl Default for AtmConfig {
    fn default() -> Self {
        AtmConfig {
            topics: 32,
            hidden: 128,
            epochs: 100,
            batch: 64,
            lr: 3e-3,
            mode: TrainMode::Causal,
            family: OutcomeFamily::Continuous,
            binary_loss: BinaryOutcomeLoss::CrossEntropy,
            supervision_weight: 1.0,
            seed: 0,
        }
    }
}

impl AtmConfig {
    fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::Invalid(format!("need at least 2 topics, got {}", self.topics)));
        }
        if self.hidden == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Invalid("hidden, batch and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.supervision_weight >= 0.0) {
            return Err(Error::Invalid("lr must be positive, supervision weight nonnegative".into()));
        }
        Ok(())
    }

    fn supervised(&self) -> bool {
        self.mode != TrainMode::Unsupervised && self.supervision_weight > 0.0
    }
}

/// `θ ↦ wᵀθ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    fn zeros(k: usize) -> Self {
        LinearHead {
            w: Tensor::zeros(k, 1),
            b: Tensor::zeros(1, 1),
        }
    }

    /// `[w; b]`, length K+1.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = self.w.data().to_vec();
        c.push(self.b.item());
        c
    }

    pub fn apply(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(self.w.data()).map(|(a, b)| a * b).sum::<f64>() + self.b.item()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtmParams {
    pub enc_w1: Tensor,
    pub enc_b1: Tensor,
    pub enc_w_mu: Tensor,
    pub enc_b_mu: Tensor,
    pub enc_w_logsigma: Tensor,
    pub enc_b_logsigma: Tensor,
    /// `[K×V]`; `softmax` over rows gives the topics.
    pub beta_logits: Tensor,
    pub gamma_g: LinearHead,
    pub gamma_q0: LinearHead,
    pub gamma_q1: LinearHead,
}

pub(crate) const PARAM_NAMES: [&str; 13] = [
    "enc_w1",
    "enc_b1",
    "enc_w_mu",
    "enc_b_mu",
    "enc_w_logsigma",
    "enc_b_logsigma",
    "beta_logits",
    "gamma_g.w",
    "gamma_g.b",
    "gamma_q0.w",
    "gamma_q0.b",
    "gamma_q1.w",
    "gamma_q1.b",
];

impl AtmParams {
    /// All-zero parameters: `μ = 0`, `σ = 1`, uniform topics, zero heads.
    pub fn zeros(vocab: usize, hidden: usize, topics: usize) -> Self {
        AtmParams {
            enc_w1: Tensor::zeros(vocab, hidden),
            enc_b1: Tensor::zeros(1, hidden),
            enc_w_mu: Tensor::zeros(hidden, topics),
            enc_b_mu: Tensor::zeros(1, topics),
            enc_w_logsigma: Tensor::zeros(hidden, topics),
            enc_b_logsigma: Tensor::zeros(1, topics),
            beta_logits: Tensor::zeros(topics, vocab),
            gamma_g: LinearHead::zeros(topics),
            gamma_q0: LinearHead::zeros(topics),
            gamma_q1: LinearHead::zeros(topics),
        }
    }

    /// Random encoder and topic logits; heads start at zero.
    pub fn init<R: Rng + ?Sized>(vocab: usize, hidden: usize, topics: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(vocab, hidden, topics);
        // Inputs are normalized counts, so first-layer pre-activations scale
        // like the norm of the input rather than with V.
        p.enc_w1 = Tensor::randn(vocab, hidden, 1.0, rng);
        p.enc_w_mu = Tensor::randn(hidden, topics, (1.0 / hidden as f64).sqrt(), rng);
        p.enc_w_logsigma = Tensor::randn(hidden, topics, 0.1 * (1.0 / hidden as f64).sqrt(), rng);
        p.beta_logits = Tensor::randn(topics, vocab, 0.1, rng);
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.enc_w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.enc_w1.cols()
    }

    pub fn topics(&self) -> usize {
        self.beta_logits.rows()
    }

    pub fn beta(&self) -> Tensor {
        self.beta_logits.softmax_rows()
    }

    pub fn tensors(&self) -> [&Tensor; 13] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w_mu,
            &self.enc_b_mu,
            &self.enc_w_logsigma,
            &self.enc_b_logsigma,
            &self.beta_logits,
            &self.gamma_g.w,
            &self.gamma_g.b,
            &self.gamma_q0.w,
            &self.gamma_q0.b,
            &self.gamma_q1.w,
            &self.gamma_q1.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w_mu,
            &mut self.enc_b_mu,
            &mut self.enc_w_logsigma,
            &mut self.enc_b_logsigma,
            &mut self.beta_logits,
            &mut self.gamma_g.w,
            &mut self.gamma_g.b,
            &mut self.gamma_q0.w,
            &mut self.gamma_q0.b,
            &mut self.gamma_q1.w,
            &mut self.gamma_q1.b,
        ]
    }

    pub fn from_tensors(t: Vec<Tensor>) -> Result<Self> {
        let [w1, b1, wmu, bmu, wls, bls, beta, gw, gb, q0w, q0b, q1w, q1b]: [Tensor; 13] = t
            .try_into()
            .map_err(|v: Vec<Tensor>| Error::Invalid(format!("expected 13 tensors, got {}", v.len())))?;
        let p = AtmParams {
            enc_w1: w1,
            enc_b1: b1,
            enc_w_mu: wmu,
            enc_b_mu: bmu,
            enc_w_logsigma: wls,
            enc_b_logsigma: bls,
            beta_logits: beta,
            gamma_g: LinearHead { w: gw, b: gb },
            gamma_q0: LinearHead { w: q0w, b: q0b },
            gamma_q1: LinearHead { w: q1w, b: q1b },
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let (v, h, k) = (self.vocab_size(), self.hidden(), self.topics());
        let expected = [
            [v, h],
            [1, h],
            [h, k],
            [1, k],
            [h, k],
            [1, k],
            [k, v],
            [k, 1],
            [1, 1],
            [k, 1],
            [1, 1],
            [k, 1],
            [1, 1],
        ];
        for ((t, want), name) in self.tensors().iter().zip(expected).zip(PARAM_NAMES) {
            if t.shape() != want {
                return Err(Error::shape("atm_params", format!("{name}: {:?}, expected {want:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior over `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// A point on the probability simplex: a document's topic proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta(Vec<f64>);

impl Theta {
    pub fn from_logits(r: &[f64]) -> Self {
        let mut v = r.to_vec();
        crate::tensor::softmax_in_place(&mut v);
        Theta(v)
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        let s: f64 = values.iter().sum();
        if values.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("theta is not on the simplex".into()));
        }
        Ok(Theta(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn normalized_row(bow: &SparseCounts, vocab: usize) -> Result<Tensor> {
    let mut x = Tensor::zeros(1, vocab);
    let total = bow.total() as f64;
    for &(i, c) in bow.entries() {
        if i as usize >= vocab {
            return Err(Error::shape("encode", format!("token {i} outside vocabulary of {vocab}")));
        }
        x.data_mut()[i as usize] = f64::from(c) / total;
    }
    Ok(x)
}

fn count_row(bow: &SparseCounts, vocab: usize) -> Result<Tensor> {
    let mut x = Tensor::zeros(1, vocab);
    for &(i, c) in bow.entries() {
        if i as usize >= vocab {
            return Err(Error::shape("counts", format!("token {i} outside vocabulary of {vocab}")));
        }
        x.data_mut()[i as usize] = f64::from(c);
    }
    Ok(x)
}

/// Encoder forward pass on a batch of normalized count rows.
fn encode_batch(x: &Tensor, p: &AtmParams) -> Result<(Tensor, Tensor)> {
    let mut h = x.matmul(&p.enc_w1)?;
    for r in 0..h.rows() {
        for (v, b) in h.row_mut(r).iter_mut().zip(p.enc_b1.data()) {
            *v = (*v + b).max(0.0);
        }
    }
    let affine = |w: &Tensor, b: &Tensor| -> Result<Tensor> {
        let mut o = h.matmul(w)?;
        for r in 0..o.rows() {
            for (v, bb) in o.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        Ok(o)
    };
    let mu = affine(&p.enc_w_mu, &p.enc_b_mu)?;
    let sigma = affine(&p.enc_w_logsigma, &p.enc_b_logsigma)?.map(|ls| ls.max(SIGMA_FLOOR.ln()).exp());
    Ok((mu, sigma))
}

/// Variational posterior for one document.
pub fn encode(bow: &SparseCounts, params: &AtmParams) -> Result<PosteriorParams> {
    let x = normalized_row(bow, params.vocab_size())?;
    let (mu, sigma) = encode_batch(&x, params)?;
    Ok(PosteriorParams {
        mu: mu.into_data(),
        sigma: sigma.into_data(),
    })
}

/// `KL(N(μ, diag σ²) ‖ N(0, I))` in closed form.
pub fn kl_diag_normal(q: &PosteriorParams) -> Result<f64> {
    if q.mu.len() != q.sigma.len() {
        return Err(Error::shape("kl_diag_normal", "mu and sigma lengths differ"));
    }
    let mut kl = 0.0;
    for (&m, &s) in q.mu.iter().zip(&q.sigma) {
        if !(s > 0.0) {
            return Err(Error::Invalid(format!("nonpositive sigma {s}")));
        }
        kl += m * m + s * s - 1.0 - (s * s).ln();
    }
    Ok(0.5 * kl)
}

/// `Σ_v c_v ln (θᵀβ)_v`.
pub fn reconstruction_loglik(bow: &SparseCounts, theta: &Theta, beta: &Tensor) -> Result<f64> {
    if theta.0.len() != beta.rows() {
        return Err(Error::shape("reconstruction_loglik", "theta length differs from topic count"));
    }
    let mut ll = 0.0;
    for &(w, c) in bow.entries() {
        let w = w as usize;
        if w >= beta.cols() {
            return Err(Error::shape("reconstruction_loglik", format!("token {w} outside vocabulary")));
        }
        let p: f64 = theta.0.iter().enumerate().map(|(k, t)| t * beta.get(k, w)).sum();
        if p <= 0.0 {
            return Err(Error::ZeroProbabilityToken(w));
        }
        ll += f64::from(c) * p.ln();
    }
    Ok(ll)
}

/// Single-sample ELBO estimate for one document.
pub fn elbo<R: Rng + ?Sized>(bow: &SparseCounts, params: &AtmParams, rng: &mut R) -> Result<f64> {
    let q = encode(bow, params)?;
    let r: Vec<f64> = q
        .mu
        .iter()
        .zip(&q.sigma)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let theta = Theta::from_logits(&r);
    Ok(reconstruction_loglik(bow, &theta, &params.beta())? - kl_diag_normal(&q)?)
}

/// Labels for a batch, aligned with the count rows.
#[derive(Clone, Debug)]
pub struct BatchLabels {
    pub treatment: Vec<f64>,
    pub outcome: Option<Vec<f64>>,
}

/// Everything the loss needs besides parameters.
#[derive(Clone, Debug)]
pub struct Batch {
    pub normalized: Tensor,
    pub counts: Tensor,
    pub labels: BatchLabels,
    /// Standard-normal noise `[n×K]` for the reparameterized draw.
    pub noise: Tensor,
}

impl Batch {
    pub fn from_corpus<R: Rng + ?Sized>(
        corpus: &BowCorpus,
        idx: &[usize],
        outcome: Option<&[f64]>,
        topics: usize,
        rng: &mut R,
    ) -> Self {
        let docs = corpus.docs();
        Batch {
            normalized: corpus.normalized_matrix(idx),
            counts: corpus.count_matrix(idx),
            labels: BatchLabels {
                treatment: idx.iter().map(|&i| f64::from(docs[i].treatment)).collect(),
                outcome: outcome.map(|y| idx.iter().map(|&i| y[i]).collect()),
            },
            noise: Tensor::randn(idx.len(), topics, 1.0, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.normalized.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which loss terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub mode: TrainMode,
    pub family: OutcomeFamily,
    pub binary_loss: BinaryOutcomeLoss,
    pub supervision_weight: f64,
}

impl From<&AtmConfig> for LossSpec {
    fn from(c: &AtmConfig) -> Self {
        LossSpec {
            mode: c.mode,
            family: c.family,
            binary_loss: c.binary_loss,
            supervision_weight: c.supervision_weight,
        }
    }
}

/// Scalar mean loss plus per-document components, all graph nodes.
pub struct LossNodes {
    pub total: Var,
    pub neg_elbo: Option<Var>,
    pub treatment_ce: Option<Var>,
    pub outcome: Option<Var>,
}

/// Builds the mean per-document loss on `graph`. `p` are the 13 parameter
/// leaves in [`AtmParams::tensors`] order.
pub fn build_loss(graph: &mut Graph, p: &[Var], batch: &Batch, spec: &LossSpec) -> Result<LossNodes> {
    if p.len() != 13 {
        return Err(Error::shape("build_loss", format!("{} parameter nodes", p.len())));
    }
    let x = graph.constant(batch.normalized.clone());
    let pre = graph.affine(x, p[0], p[1])?;
    let h = graph.relu(pre);
    let mu = graph.affine(h, p[2], p[3])?;

    let mut neg_elbo = None;
    let theta = if spec.mode == TrainMode::SupervisedOnly {
        graph.softmax_rows(mu)
    } else {
        let raw_ls = graph.affine(h, p[4], p[5])?;
        let log_sigma = graph.clamp_min(raw_ls, SIGMA_FLOOR.ln());
        let sigma = graph.exp(log_sigma);
        let r = graph.reparam_with_noise(mu, sigma, batch.noise.clone())?;
        let theta = graph.softmax_rows(r);

        let beta = graph.softmax_rows(p[6]);
        let probs = graph.matmul(theta, beta)?;
        let recon = graph.count_loglik(probs, batch.counts.clone())?;

        // ½ Σ_k (μ² + σ² − 1 − 2 ln σ)
        let mu2 = graph.square(mu);
        let s2 = graph.square(sigma);
        let ls2 = graph.scale(log_sigma, -2.0);
        let a = graph.add(mu2, s2)?;
        let b = graph.add(a, ls2)?;
        let c = graph.offset(b, -1.0);
        let row = graph.sum_cols(c);
        let kl = graph.scale(row, 0.5);
        neg_elbo = Some(graph.sub(kl, recon)?);
        theta
    };

    let supervised = spec.mode != TrainMode::Unsupervised && spec.supervision_weight > 0.0;
    let mut treatment_ce = None;
    let mut outcome = None;
    let mut total = neg_elbo;
    if supervised {
        let n = batch.len();
        let t = Tensor::column_vector(batch.labels.treatment.clone());
        let g_logit = graph.affine(theta, p[7], p[8])?;
        let ce = graph.bce_with_logits(g_logit, t.clone())?;

        let y = batch
            .labels
            .outcome
            .clone()
            .ok_or_else(|| Error::Invalid("missing outcome for supervised loss".into()))?;
        let y = Tensor::column_vector(y);
        let q0 = graph.affine(theta, p[9], p[10])?;
        let q1 = graph.affine(theta, p[11], p[12])?;
        let m1 = graph.constant(t.clone());
        let m0 = graph.constant(t.map(|v| 1.0 - v));
        let q0m = graph.mul(q0, m0)?;
        let q1m = graph.mul(q1, m1)?;
        let q_obs = graph.add(q0m, q1m)?;
        let out = match (spec.family, spec.binary_loss) {
            (OutcomeFamily::Continuous, _) => graph.squared_error(q_obs, y)?,
            (OutcomeFamily::Binary, BinaryOutcomeLoss::CrossEntropy) => graph.bce_with_logits(q_obs, y)?,
            (OutcomeFamily::Binary, BinaryOutcomeLoss::SquaredError) => {
                let prob = graph.sigmoid(q_obs);
                graph.squared_error(prob, y)?
            }
        };
        debug_assert_eq!(graph.value(out).rows(), n);
        let sup = graph.add(ce, out)?;
        let sup = if spec.supervision_weight == 1.0 {
            sup
        } else {
            graph.scale(sup, spec.supervision_weight)
        };
        total = Some(match total {
            Some(ne) => graph.add(ne, sup)?,
            None => sup,
        });
        treatment_ce = Some(ce);
        outcome = Some(out);
    }
    let per_doc = total.ok_or_else(|| Error::Invalid("loss has no terms".into()))?;
    Ok(LossNodes {
        total: graph.mean(per_doc),
        neg_elbo,
        treatment_ce,
        outcome,
    })
}

/// Per-document loss for a single document, one reparameterized sample.
pub fn causal_loss<R: Rng + ?Sized>(
    bow: &SparseCounts,
    t: u8,
    y: Option<f64>,
    params: &AtmParams,
    rng: &mut R,
    spec: &LossSpec,
) -> Result<f64> {
    if t > 1 {
        return Err(Error::Invalid(format!("treatment {t} not in {{0,1}}")));
    }
    let needs_y = spec.mode != TrainMode::Unsupervised && spec.supervision_weight > 0.0;
    if needs_y && y.is_none() {
        return Err(Error::Invalid("missing outcome".into()));
    }
    let v = params.vocab_size();
    let batch = Batch {
        normalized: normalized_row(bow, v)?,
        counts: count_row(bow, v)?,
        labels: BatchLabels {
            treatment: vec![f64::from(t)],
            outcome: y.map(|y| vec![y]),
        },
        noise: Tensor::randn(1, params.topics(), 1.0, rng),
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| g.leaf((*t).clone())).collect();
    let nodes = build_loss(&mut g, &vars, &batch, spec)?;
    Ok(g.value(nodes.total).item())
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: AtmParams,
    /// Mean per-document loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Fits the model on the documents `idx` of `corpus` by minibatch Adam.
///
/// `outcome` is indexed like the corpus and required unless the mode is
/// unsupervised.
pub fn train(
    corpus: &BowCorpus,
    idx: &[usize],
    outcome: Option<&[f64]>,
    config: &AtmConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if idx.is_empty() {
        return Err(Error::Invalid("cannot train on an empty corpus".into()));
    }
    if config.supervised() {
        let y = outcome.ok_or_else(|| Error::Invalid("outcome required for supervised training".into()))?;
        if y.len() != corpus.len() {
            return Err(Error::shape("train", "outcome length differs from corpus"));
        }
        if config.family == OutcomeFamily::Binary && idx.iter().any(|&i| y[i] != 0.0 && y[i] != 1.0) {
            return Err(Error::Invalid("binary outcome family needs outcomes in {0,1}".into()));
        }
    }
    let spec = LossSpec::from(config);
    let outcome = if config.supervised() { outcome } else { None };

    let mut rng = seed::rng(config.seed);
    let mut params = AtmParams::init(corpus.vocab().len(), config.hidden, config.topics, &mut rng);
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, &params.tensors());
    let mut order = idx.to_vec();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(config.batch).enumerate() {
            let batch = Batch::from_corpus(corpus, chunk, outcome, config.topics, &mut rng);
            let mut g = Graph::new();
            let vars: Vec<Var> = params.tensors().iter().map(|t| g.leaf((*t).clone())).collect();
            let nodes = build_loss(&mut g, &vars, &batch, &spec)?;
            let loss = g.value(nodes.total).item();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss * chunk.len() as f64;
            let mut grads = g.backward(nodes.total)?;
            let grads: Vec<Tensor> = vars.iter().map(|v| grads.take(*v)).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut params.tensors_mut(), &grad_refs)
                .map_err(|e| match e {
                    Error::NonFiniteGradient => Error::NonFiniteLoss { epoch, batch: bi },
                    other => other,
                })?;
        }
        trace.push(epoch_loss / order.len() as f64);
    }
    Ok(TrainedModel {
        params,
        loss_trace: trace,
    })
}

/// Deterministic embedding `softmax(μ)` for documents `idx`, `[n×K]`.
pub fn embed(corpus: &BowCorpus, idx: &[usize], params: &AtmParams) -> Result<Tensor> {
    check_vocab(corpus, params)?;
    let (mu, _) = encode_batch(&corpus.normalized_matrix(idx), params)?;
    Ok(mu.softmax_rows())
}

fn check_vocab(corpus: &BowCorpus, params: &AtmParams) -> Result<()> {
    if corpus.vocab().len() != params.vocab_size() {
        return Err(Error::shape(
            "atm",
            format!(
                "corpus vocabulary {} vs model vocabulary {}",
                corpus.vocab().len(),
                params.vocab_size()
            ),
        ));
    }
    Ok(())
}

/// Head outputs `(ĝ, Q̂0, Q̂1)` at embedding `theta`.
pub fn head_predictions(theta: &[f64], params: &AtmParams, family: OutcomeFamily) -> (f64, f64, f64) {
    let g = open_unit(sigmoid(params.gamma_g.apply(theta)));
    let q0 = params.gamma_q0.apply(theta);
    let q1 = params.gamma_q1.apply(theta);
    match family {
        OutcomeFamily::Continuous => (g, q0, q1),
        OutcomeFamily::Binary => (g, sigmoid(q0), sigmoid(q1)),
    }
}

/// In-sample nuisances for documents `idx`.
pub fn predict_nuisances(
    corpus: &BowCorpus,
    idx: &[usize],
    params: &AtmParams,
    family: OutcomeFamily,
) -> Result<Nuisances> {
    let theta = embed(corpus, idx, params)?;
    let mut g = Vec::with_capacity(idx.len());
    let mut q0 = Vec::with_capacity(idx.len());
    let mut q1 = Vec::with_capacity(idx.len());
    for r in 0..theta.rows() {
        let (a, b, c) = head_predictions(theta.row(r), params, family);
        g.push(a);
        q0.push(b);
        q1.push(c);
    }
    Nuisances::new(g, q0, q1)
}

/// Trains one model per fold on the other folds and predicts the held-out
/// fold with it. Fold `f` uses seed `derive(config.seed, f)`.
pub fn cross_fit(
    corpus: &BowCorpus,
    outcome: Option<&[f64]>,
    config: &AtmConfig,
    folds: &FoldAssignment,
) -> Result<(Nuisances, Vec<TrainedModel>)> {
    if folds.fold_of.len() != corpus.len() {
        return Err(Error::shape(
            "cross_fit",
            format!("{} fold labels for {} docs", folds.fold_of.len(), corpus.len()),
        ));
    }
    let fits: Vec<Result<(Vec<usize>, Nuisances, TrainedModel)>> = (0..folds.k)
        .into_par_iter()
        .map(|f| {
            let cfg = AtmConfig {
                seed: seed::derive(config.seed, f as u64),
                ..config.clone()
            };
            let model = train(corpus, &folds.complement(f), outcome, &cfg)?;
            let held_out = folds.members(f);
            let nuis = predict_nuisances(corpus, &held_out, &model.params, config.family)?;
            Ok((held_out, nuis, model))
        })
        .collect();

    let n = corpus.len();
    let (mut g, mut q0, mut q1) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    let mut models = Vec::with_capacity(folds.k);
    for fit in fits {
        let (held_out, nuis, model) = fit?;
        for (j, &i) in held_out.iter().enumerate() {
            g[i] = nuis.g[j];
            q0[i] = nuis.q0[j];
            q1[i] = nuis.q1[j];
        }
        models.push(model);
    }
    Ok((Nuisances::new(g, q0, q1)?, models))
}

const CHECKPOINT_FORMAT: &str = "catm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: AtmConfig,
    vocab_hash: String,
    params: Vec<NamedArray>,
}

pub fn save_checkpoint(path: &Path, params: &AtmParams, config: &AtmConfig, vocab_hash: &str) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocab_hash: vocab_hash.into(),
        params: params
            .tensors()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(t, name)| NamedArray {
                name: name.into(),
                shape: t.shape(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, verifying its version and that it was trained on the
/// vocabulary with hash `vocab_hash`.
pub fn load_checkpoint(path: &Path, vocab_hash: &str) -> Result<(AtmParams, AtmConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    if file.vocab_hash != vocab_hash {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(file.params.len());
    for (arr, name) in file.params.into_iter().zip(PARAM_NAMES) {
        if arr.name != name {
            return Err(Error::Checkpoint(format!("expected array `{name}`, found `{}`", arr.name)));
        }
        tensors.push(Tensor::new(arr.shape[0], arr.shape[1], arr.values)?);
    }
    Ok((AtmParams::from_tensors(tensors)?, file.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BowDoc, Vocab};

    fn counts(pairs: &[(u32, u32)]) -> SparseCounts {
        SparseCounts::from_pairs(pairs.to_vec())
    }

    #[test]
    fn zero_encoder_gives_prior() {
        let p = AtmParams::zeros(4, 3, 2);
        let q = encode(&counts(&[(0, 2), (3, 1)]), &p).unwrap();
        assert_eq!(q.mu, vec![0.0, 0.0]);
        assert_eq!(q.sigma, vec![1.0, 1.0]);
        assert_eq!(kl_diag_normal(&q).unwrap(), 0.0);
        let empty = encode(&SparseCounts::default(), &p).unwrap();
        assert_eq!(empty.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn kl_values() {
        let q = PosteriorParams {
            mu: vec![1.0],
            sigma: vec![1.0],
        };
        assert!((kl_diag_normal(&q).unwrap() - 0.5).abs() < 1e-15);
        let bad = PosteriorParams {
            mu: vec![0.0],
            sigma: vec![0.0],
        };
        assert!(kl_diag_normal(&bad).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        // K=1: ln β_w
        let beta = Tensor::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let th = Theta::new(vec![1.0]).unwrap();
        let ll = reconstruction_loglik(&counts(&[(1, 1)]), &th, &beta).unwrap();
        assert!((ll - 0.75f64.ln()).abs() < 1e-15);

        // uniform β
        let beta = Tensor::filled(3, 4, 0.25);
        let th = Theta::new(vec![0.2, 0.3, 0.5]).unwrap();
        let ll = reconstruction_loglik(&counts(&[(0, 3), (2, 2)]), &th, &beta).unwrap();
        assert!((ll - 5.0 * 0.25f64.ln()).abs() < 1e-12);

        // θ=(½,½), β column (0.2, 0.6) at w, count 2 → 2 ln 0.4
        let beta = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let th = Theta::new(vec![0.5, 0.5]).unwrap();
        let ll = reconstruction_loglik(&counts(&[(0, 2)]), &th, &beta).unwrap();
        assert!((ll - 2.0 * 0.4f64.ln()).abs() < 1e-15);

        assert_eq!(reconstruction_loglik(&SparseCounts::default(), &th, &beta).unwrap(), 0.0);

        let beta = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            reconstruction_loglik(&counts(&[(0, 1)]), &th, &beta),
            Err(Error::ZeroProbabilityToken(0))
        ));
    }

    #[test]
    fn elbo_is_seed_deterministic() {
        let mut rng = seed::rng(1);
        let p = AtmParams::init(6, 4, 3, &mut rng);
        let doc = counts(&[(0, 1), (4, 3)]);
        let a = elbo(&doc, &p, &mut seed::rng(9)).unwrap();
        let b = elbo(&doc, &p, &mut seed::rng(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn collapsed_sigma_gives_reconstruction_minus_floored_kl() {
        // K=1 → θ=1 regardless of r, so only the KL guard is in play.
        let mut p = AtmParams::zeros(3, 2, 1);
        p.enc_b_logsigma = Tensor::scalar(-100.0);
        p.beta_logits = Tensor::row_vector(vec![0.0, 1.0, 2.0]);
        let doc = counts(&[(2, 2)]);
        let recon = 2.0 * p.beta().get(0, 2).ln();
        let q = encode(&doc, &p).unwrap();
        assert!((q.sigma[0] - SIGMA_FLOOR).abs() < 1e-18);
        let kl = kl_diag_normal(&q).unwrap();
        assert!(kl.is_finite());
        let e = elbo(&doc, &p, &mut seed::rng(0)).unwrap();
        assert!((e - (recon - kl)).abs() < 1e-9);
    }

    fn toy_corpus() -> BowCorpus {
        let vocab = Vocab::from_tokens((0..6).map(|i| format!("w{i}")).collect()).unwrap();
        let docs = (0..8)
            .map(|i| BowDoc {
                id: i.to_string(),
                counts: counts(&[((i % 6) as u32, 2), (((i + 1) % 6) as u32, 1)]),
                treatment: (i % 2) as u8,
                outcome: Some(i as f64 * 0.5),
                strata: None,
            })
            .collect();
        BowCorpus::new(docs, vocab).unwrap()
    }

    #[test]
    fn zero_supervision_weight_reduces_to_negative_elbo() {
        let mut rng = seed::rng(3);
        let p = AtmParams::init(6, 4, 3, &mut rng);
        let doc = counts(&[(1, 2), (5, 1)]);
        let spec = |mode, w| LossSpec {
            mode,
            family: OutcomeFamily::Continuous,
            binary_loss: BinaryOutcomeLoss::CrossEntropy,
            supervision_weight: w,
        };
        let causal = causal_loss(&doc, 1, Some(2.0), &p, &mut seed::rng(5), &spec(TrainMode::Causal, 0.0)).unwrap();
        let e = elbo(&doc, &p, &mut seed::rng(5)).unwrap();
        assert!((causal + e).abs() < 1e-12);
        assert!(causal_loss(&doc, 1, None, &p, &mut seed::rng(5), &spec(TrainMode::Causal, 1.0)).is_err());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let c = toy_corpus();
        let y = c.outcomes().unwrap();
        let cfg = AtmConfig {
            topics: 2,
            hidden: 4,
            epochs: 3,
            batch: 3,
            lr: 0.01,
            seed: 11,
            ..AtmConfig::default()
        };
        let idx: Vec<usize> = (0..c.len()).collect();
        let a = train(&c, &idx, Some(&y), &cfg).unwrap();
        let b = train(&c, &idx, Some(&y), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.loss_trace.len(), 3);
    }

    #[test]
    fn causal_with_zero_weight_matches_unsupervised_bitwise() {
        let c = toy_corpus();
        let y = c.outcomes().unwrap();
        let idx: Vec<usize> = (0..c.len()).collect();
        let base = AtmConfig {
            topics: 3,
            hidden: 5,
            epochs: 4,
            batch: 3,
            lr: 0.01,
            seed: 2,
            ..AtmConfig::default()
        };
        let causal = AtmConfig {
            supervision_weight: 0.0,
            ..base.clone()
        };
        let unsup = AtmConfig {
            mode: TrainMode::Unsupervised,
            ..base
        };
        let a = train(&c, &idx, Some(&y), &causal).unwrap();
        let b = train(&c, &idx, None, &unsup).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn zero_heads_predict_half_and_zero() {
        let c = toy_corpus();
        let p = AtmParams::zeros(6, 3, 2);
        let idx: Vec<usize> = (0..c.len()).collect();
        let n = predict_nuisances(&c, &idx, &p, OutcomeFamily::Continuous).unwrap();
        assert!(n.g.iter().all(|&g| g == 0.5));
        assert!(n.q0.iter().chain(&n.q1).all(|&q| q == 0.0));
        let n = predict_nuisances(&c, &idx, &p, OutcomeFamily::Binary).unwrap();
        assert!(n.q0.iter().chain(&n.q1).all(|&q| q == 0.5));
    }

    #[test]
    fn supervised_training_requires_outcome() {
        let c = toy_corpus();
        let idx: Vec<usize> = (0..c.len()).collect();
        assert!(train(&c, &idx, None, &AtmConfig::default()).is_err());
        assert!(train(&c, &[], None, &AtmConfig { mode: TrainMode::Unsupervised, ..AtmConfig::default() }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut rng = seed::rng(4);
        let p = AtmParams::init(5, 3, 2, &mut rng);
        let cfg = AtmConfig::default();
        save_checkpoint(&path, &p, &cfg, "abc").unwrap();
        let (q, c2) = load_checkpoint(&path, "abc").unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg, c2);
        assert!(matches!(load_checkpoint(&path, "xyz"), Err(Error::Checkpoint(_))));

        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path, "abc"), Err(Error::Checkpoint(_))));
    }
}

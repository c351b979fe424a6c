use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::RunConfig;
use crate::atm::{self, AtmConfig, BinaryOutcomeLoss, OutcomeFamily, TrainMode};
use crate::baselines::{
    bow_features, fit_downstream_nuisances, lda_gibbs, one_hot_features, train_supervised_nn, DownstreamConfig,
    FeatureMatrix, LdaConfig,
};
use crate::corpus::{load_records, split_folds, BowCorpus, BowDoc, FoldAssignment, TokenizerConfig, VocabConfig};
use crate::error::{Error, Result};
use crate::estimators::{estimate_all, estimate_on, sample_sd, EstimatorKind, Nuisances, TrimBounds};
use crate::seed;
use crate::simulate::{generate_synthetic_corpus, simulate_dataset, SimConfig, SyntheticCorpusConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Representation {
    /// Causal topic model, nuisances from its own heads.
    Catm,
    /// Unsupervised topic model proportions plus downstream regressions.
    Atm,
    /// Supervised-only network on the same encoder.
    Nn,
    /// Bag-of-words plus downstream regressions.
    Bow,
    /// Gibbs LDA proportions plus downstream regressions.
    Lda,
    /// One-hot true strata plus downstream regressions.
    OracleStrata,
    /// Scalar true propensity plus downstream regressions.
    OraclePropensity,
}

impl Representation {
    pub const ALL: [Representation; 7] = [
        Representation::Catm,
        Representation::Atm,
        Representation::Nn,
        Representation::Bow,
        Representation::Lda,
        Representation::OracleStrata,
        Representation::OraclePropensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Representation::Catm => "catm",
            Representation::Atm => "atm",
            Representation::Nn => "nn",
            Representation::Bow => "bow",
            Representation::Lda => "lda",
            Representation::OracleStrata => "oracle-strata",
            Representation::OraclePropensity => "oracle-propensity",
        }
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Representation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown representation {s:?}")))
    }
}

fn parse_family(s: &str) -> Result<OutcomeFamily> {
    match s {
        "continuous" => Ok(OutcomeFamily::Continuous),
        "binary" => Ok(OutcomeFamily::Binary),
        _ => Err(Error::Invalid(format!("unknown outcome family {s:?}"))),
    }
}

fn family_name(f: OutcomeFamily) -> &'static str {
    match f {
        OutcomeFamily::Continuous => "continuous",
        OutcomeFamily::Binary => "binary",
    }
}

/// Typed view of a [`RunConfig`] for a single pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dataset: String,
    pub input: Option<PathBuf>,
    pub seed: u64,
    pub synthetic: SyntheticCorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub vocab: VocabConfig,
    pub simulate: bool,
    pub family: OutcomeFamily,
    pub b1: f64,
    pub gamma: f64,
    pub p: Option<f64>,
    pub representation: Representation,
    /// Shared network settings; mode and seed are set per representation.
    pub atm: AtmConfig,
    pub lda: LdaConfig,
    pub bow_normalize: bool,
    pub downstream: DownstreamConfig,
    pub folds: usize,
    pub trim: TrimBounds,
    pub bootstrap: usize,
    pub bootstrap_refit: bool,
}

impl PipelineConfig {
    pub fn from_run(run: &RunConfig) -> Result<Self> {
        let input = match run.get("input") {
            "" => None,
            s => Some(PathBuf::from(s)),
        };
        let binary_loss = match run.get("binary_loss") {
            "cross_entropy" => BinaryOutcomeLoss::CrossEntropy,
            "squared_error" => BinaryOutcomeLoss::SquaredError,
            s => return Err(Error::Invalid(format!("unknown binary loss {s:?}"))),
        };
        let topics = run.parsed("topics")?;
        let lda_alpha = match run.get("lda_alpha") {
            "auto" => None,
            _ => Some(run.parsed("lda_alpha")?),
        };
        let cfg = PipelineConfig {
            dataset: run.get("dataset").to_string(),
            input,
            seed: run.parsed("seed")?,
            synthetic: SyntheticCorpusConfig {
                topics: run.parsed("true_topics")?,
                vocab: run.parsed("vocab")?,
                docs: run.parsed("docs")?,
                doc_len: run.parsed("doc_len")?,
                sharpness: run.parsed("sharpness")?,
                beta_noise: run.parsed("beta_noise")?,
                propensity: run.list("propensity")?,
                seed: 0,
            },
            tokenizer: TokenizerConfig {
                min_len: run.parsed("min_token_len")?,
            },
            vocab: VocabConfig {
                min_count: run.parsed("min_count")?,
                max_size: run.parsed("max_vocab")?,
            },
            simulate: run.flag("simulate")?,
            family: parse_family(run.get("family"))?,
            b1: run.parsed("b1")?,
            gamma: run.parsed("gamma")?,
            p: run.optional_f64("p")?,
            representation: run.get("representation").parse()?,
            atm: AtmConfig {
                topics,
                hidden: run.parsed("hidden")?,
                epochs: run.parsed("epochs")?,
                batch: run.parsed("batch")?,
                lr: run.parsed("lr")?,
                mode: TrainMode::Causal,
                family: OutcomeFamily::Continuous,
                binary_loss,
                supervision_weight: run.parsed("supervision_weight")?,
                seed: 0,
            },
            lda: LdaConfig {
                topics,
                alpha: lda_alpha,
                eta0: run.parsed("lda_eta0")?,
                iterations: run.parsed("lda_iterations")?,
                burn_in: run.parsed("lda_burn_in")?,
                seed: 0,
            },
            bow_normalize: run.flag("bow_normalize")?,
            downstream: DownstreamConfig {
                l2: run.parsed("l2")?,
                tol: run.parsed("reg_tol")?,
                max_iter: run.parsed("reg_max_iter")?,
            },
            folds: run.parsed("folds")?,
            trim: TrimBounds {
                lo: run.parsed("trim_lo")?,
                hi: run.parsed("trim_hi")?,
            },
            bootstrap: run.parsed("bootstrap")?,
            bootstrap_refit: run.flag("bootstrap_refit")?,
        };
        if !(cfg.trim.lo <= cfg.trim.hi) {
            return Err(Error::Invalid("trim_lo must not exceed trim_hi".into()));
        }
        Ok(cfg)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            b1: self.b1,
            gamma: self.gamma,
            family: self.family,
            p: self.p,
            seed: seed::derive_named(self.seed, "simulate"),
        }
    }
}

/// Labeled corpus ready for representation learning.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub corpus: BowCorpus,
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
    /// Propensity that drove the simulated outcome.
    pub pi: Option<Vec<f64>>,
    pub psi_true: Option<f64>,
}

/// Loads the input records, or generates the synthetic corpus.
pub fn load_corpus(cfg: &PipelineConfig) -> Result<BowCorpus> {
    match &cfg.input {
        Some(path) => {
            let records = load_records(path)?;
            BowCorpus::from_records(&records, &cfg.tokenizer, &cfg.vocab)
        }
        None => generate_synthetic_corpus(&SyntheticCorpusConfig {
            seed: seed::derive_named(cfg.seed, "corpus"),
            ..cfg.synthetic.clone()
        }),
    }
}

/// Attaches simulated (or observed) labels.
pub fn prepare(cfg: &PipelineConfig, corpus: BowCorpus) -> Result<PreparedData> {
    if cfg.simulate {
        let sim = simulate_dataset(&corpus, &cfg.sim_config())?;
        let corpus = corpus.with_labels(&sim.treatment, &sim.outcome)?;
        Ok(PreparedData {
            corpus,
            treatment: sim.treatment,
            outcome: sim.outcome,
            pi: Some(sim.pi),
            psi_true: Some(sim.psi_true),
        })
    } else {
        let outcome = corpus
            .outcomes()
            .ok_or_else(|| Error::Invalid("every record needs an outcome when simulate = false".into()))?;
        Ok(PreparedData {
            treatment: corpus.treatments(),
            outcome,
            corpus,
            pi: None,
            psi_true: None,
        })
    }
}

fn network_config(cfg: &PipelineConfig, mode: TrainMode, seed: u64) -> AtmConfig {
    AtmConfig {
        mode,
        family: cfg.family,
        seed,
        ..cfg.atm.clone()
    }
}

/// Features a downstream-regression representation feeds to its models.
pub fn representation_features(cfg: &PipelineConfig, data: &PreparedData, seed: u64) -> Result<FeatureMatrix> {
    let corpus = &data.corpus;
    match cfg.representation {
        Representation::Atm => {
            let net = network_config(cfg, TrainMode::Unsupervised, seed::derive_named(seed, "atm"));
            let all: Vec<usize> = (0..corpus.len()).collect();
            let model = atm::train(corpus, &all, None, &net)?;
            FeatureMatrix::with_intercept(&atm::embed(corpus, &all, &model.params)?)
        }
        Representation::Bow => bow_features(corpus, cfg.bow_normalize),
        Representation::Lda => {
            let lda = LdaConfig {
                seed: seed::derive_named(seed, "lda"),
                ..cfg.lda.clone()
            };
            FeatureMatrix::with_intercept(&lda_gibbs(corpus, &lda)?)
        }
        Representation::OracleStrata => {
            let strata = corpus
                .strata()
                .ok_or_else(|| Error::Invalid("oracle-strata needs a stratum on every document".into()))?;
            one_hot_features(&strata)
        }
        Representation::OraclePropensity => {
            let pi = data
                .pi
                .as_ref()
                .ok_or_else(|| Error::Invalid("oracle-propensity needs simulated propensities".into()))?;
            FeatureMatrix::with_intercept(&Tensor::column_vector(pi.clone()))
        }
        Representation::Catm | Representation::Nn => Err(Error::Invalid(format!(
            "{} predicts nuisances directly and has no feature matrix",
            cfg.representation
        ))),
    }
}

/// Nuisances for every unit: cross-fitted when `folds` is given, else
/// in-sample.
pub fn fit_nuisances(
    cfg: &PipelineConfig,
    data: &PreparedData,
    folds: Option<&FoldAssignment>,
    seed: u64,
) -> Result<Nuisances> {
    let corpus = &data.corpus;
    match cfg.representation {
        Representation::Catm => {
            let net = network_config(cfg, TrainMode::Causal, seed::derive_named(seed, "catm"));
            match folds {
                Some(f) => Ok(atm::cross_fit(corpus, Some(&data.outcome), &net, f)?.0),
                None => {
                    let all: Vec<usize> = (0..corpus.len()).collect();
                    let model = atm::train(corpus, &all, Some(&data.outcome), &net)?;
                    atm::predict_nuisances(corpus, &all, &model.params, cfg.family)
                }
            }
        }
        Representation::Nn => {
            let net = network_config(cfg, TrainMode::SupervisedOnly, seed::derive_named(seed, "nn"));
            Ok(train_supervised_nn(corpus, &data.outcome, &net, folds)?.0)
        }
        _ => {
            let features = representation_features(cfg, data, seed)?;
            let (nuis, reports) =
                fit_downstream_nuisances(&features, &data.treatment, &data.outcome, cfg.family, &cfg.downstream, folds)?;
            let unconverged = reports.iter().filter(|r| !r.converged).count();
            if unconverged > 0 {
                log::warn!("{unconverged} of {} downstream fits hit the iteration cap", reports.len());
            }
            Ok(nuis)
        }
    }
}

fn fold_assignment(cfg: &PipelineConfig, n: usize, seed: u64) -> Result<Option<FoldAssignment>> {
    if cfg.folds < 2 {
        return Ok(None);
    }
    split_folds(n, cfg.folds, seed::derive_named(seed, "folds")).map(Some)
}

/// One line of the estimates CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateRow {
    pub dataset: String,
    pub representation: String,
    pub estimator: String,
    pub b1: Option<f64>,
    pub gamma: Option<f64>,
    pub p: Option<f64>,
    pub psi_true: Option<f64>,
    pub psi_hat: f64,
    pub sd: Option<f64>,
    pub n_kept: usize,
    pub seed: u64,
}

pub const ESTIMATE_COLUMNS: [&str; 11] = [
    "dataset",
    "representation",
    "estimator",
    "b1",
    "gamma",
    "p",
    "psi_true",
    "psi_hat",
    "sd",
    "n_kept",
    "seed",
];

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub rows: Vec<EstimateRow>,
    pub nuisances: Nuisances,
    pub vocab_hash: String,
    pub n_units: usize,
}

/// ingest → simulate → representation → nuisances → trim → estimate →
/// bootstrap. Errors carry the name of the failing stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let corpus = load_corpus(cfg).map_err(|e| e.in_stage("ingest"))?;
    let vocab_hash = corpus.vocab().hash();
    let data = prepare(cfg, corpus).map_err(|e| e.in_stage("simulate"))?;
    let n = data.corpus.len();
    let folds = fold_assignment(cfg, n, cfg.seed).map_err(|e| e.in_stage("folds"))?;
    let nuis = fit_nuisances(cfg, &data, folds.as_ref(), cfg.seed).map_err(|e| e.in_stage("representation"))?;

    let boot_seed = seed::derive_named(cfg.seed, "bootstrap");
    let fixed_replicates = if cfg.bootstrap_refit { 0 } else { cfg.bootstrap };
    let mut estimates = estimate_all(&data.treatment, &data.outcome, &nuis, cfg.trim, fixed_replicates, boot_seed)
        .map_err(|e| e.in_stage("estimate"))?;
    if cfg.bootstrap_refit && cfg.bootstrap > 0 {
        let sds = refit_bootstrap(cfg, &data, boot_seed).map_err(|e| e.in_stage("bootstrap"))?;
        for (e, sd) in estimates.iter_mut().zip(sds) {
            e.bootstrap_sd = sd;
        }
    }

    let simulated = cfg.simulate;
    let rows = estimates
        .iter()
        .map(|e| EstimateRow {
            dataset: cfg.dataset.clone(),
            representation: cfg.representation.to_string(),
            estimator: e.kind.to_string(),
            b1: simulated.then_some(cfg.b1),
            gamma: (simulated && cfg.family == OutcomeFamily::Continuous).then_some(cfg.gamma),
            p: if simulated { cfg.p } else { None },
            psi_true: data.psi_true,
            psi_hat: e.psi_hat,
            sd: e.bootstrap_sd,
            n_kept: e.n_kept,
            seed: cfg.seed,
        })
        .collect();
    Ok(PipelineOutput {
        rows,
        nuisances: nuis,
        vocab_hash,
        n_units: n,
    })
}

/// Bootstrap that refits the representation on every resample. Returns one
/// sd per estimator kind, `None` where fewer than two replicates succeeded.
fn refit_bootstrap(cfg: &PipelineConfig, data: &PreparedData, boot_seed: u64) -> Result<Vec<Option<f64>>> {
    use rayon::prelude::*;
    let n = data.corpus.len();
    let replicate = |r: usize| -> Result<Vec<f64>> {
        let rep_seed = seed::derive(boot_seed, r as u64);
        let mut rng = seed::rng(rep_seed);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let docs: Vec<BowDoc> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let d = &data.corpus.docs()[i];
                BowDoc {
                    id: format!("{}#{j}", d.id),
                    ..d.clone()
                }
            })
            .collect();
        let resampled = PreparedData {
            corpus: BowCorpus::new(docs, data.corpus.vocab().clone())?,
            treatment: idx.iter().map(|&i| data.treatment[i]).collect(),
            outcome: idx.iter().map(|&i| data.outcome[i]).collect(),
            pi: data.pi.as_ref().map(|pi| idx.iter().map(|&i| pi[i]).collect()),
            psi_true: data.psi_true,
        };
        let folds = fold_assignment(cfg, n, rep_seed)?;
        let nuis = fit_nuisances(cfg, &resampled, folds.as_ref(), rep_seed)?;
        let all: Vec<usize> = (0..n).collect();
        EstimatorKind::ALL
            .iter()
            .map(|&k| estimate_on(k, &all, &resampled.treatment, &resampled.outcome, &nuis, cfg.trim).map(|r| r.0))
            .collect()
    };
    let results: Vec<Result<Vec<f64>>> = (0..cfg.bootstrap).into_par_iter().map(replicate).collect();
    let mut per_kind = vec![Vec::new(); EstimatorKind::ALL.len()];
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(vals) => {
                for (k, v) in vals.into_iter().enumerate() {
                    per_kind[k].push(v);
                }
            }
            Err(e) => log::warn!("bootstrap replicate {r} dropped: {e}"),
        }
    }
    Ok(per_kind
        .into_iter()
        .map(|v| (v.len() >= 2).then(|| sample_sd(&v)))
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Estimates as CSV text with a header row; missing values are empty.
pub fn estimates_csv(rows: &[EstimateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ESTIMATE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.representation.clone(),
            r.estimator.clone(),
            opt(r.b1),
            opt(r.gamma),
            opt(r.p),
            opt(r.psi_true),
            r.psi_hat.to_string(),
            opt(r.sd),
            r.n_kept.to_string(),
            r.seed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    vocab_hash: Option<&'a str>,
    version: &'a str,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `config.txt` (the full resolved configuration) and
/// `manifest.json` (seed, vocabulary hash, software version).
pub fn write_run_metadata(dir: &Path, command: &str, run: &RunConfig, vocab_hash: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.txt"), &run.echo())?;
    let manifest = Manifest {
        command,
        seed: run.parsed("seed")?,
        vocab_hash,
        version: crate::VERSION,
    };
    write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
}

/// Runs the pipeline and writes `estimates.csv`, `config.txt`,
/// `manifest.json` and `timing.txt` into `out_dir`. Everything except the
/// timing file is a deterministic function of the configuration.
pub fn cmd_pipeline(run: &RunConfig, out_dir: &Path) -> Result<PipelineOutput> {
    let cfg = PipelineConfig::from_run(run)?;
    if let Some(p) = &cfg.input {
        if !p.exists() {
            return Err(Error::Invalid(format!("input {} does not exist", p.display())).in_stage("ingest"));
        }
    }
    let start = Instant::now();
    let out = run_pipeline(&cfg)?;
    let secs = start.elapsed().as_secs_f64();
    write_run_metadata(out_dir, "estimate", run, Some(&out.vocab_hash))?;
    write_file(&out_dir.join("estimates.csv"), &estimates_csv(&out.rows)?)?;
    write_file(&out_dir.join("timing.txt"), &format!("wall_seconds = {secs:.3}\n"))?;
    log::info!(
        "{} on {} units ({}): {secs:.1}s",
        cfg.representation,
        out.n_units,
        family_name(cfg.family)
    );
    Ok(out)
}

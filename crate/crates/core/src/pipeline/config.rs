//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every recognized key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; every stage seed derives from it"),
    ("dataset", "synthetic", "dataset label written to the estimates"),
    ("input", "", "line-delimited JSON records; empty generates a synthetic corpus"),
    ("docs", "2000", "synthetic: number of documents"),
    ("vocab", "200", "synthetic: vocabulary size"),
    ("true_topics", "5", "synthetic: number of generating topics (= strata)"),
    ("doc_len", "60", "synthetic: tokens per document"),
    ("sharpness", "100", "synthetic: Dirichlet concentration is 1/sharpness"),
    ("beta_noise", "0.1", "synthetic: topic mass spread over the whole vocabulary"),
    ("propensity", "0.2,0.35,0.5,0.65,0.8", "synthetic: treatment probability per stratum"),
    ("min_token_len", "2", "tokenizer: shortest kept token"),
    ("min_count", "1", "vocabulary: minimum corpus frequency"),
    ("max_vocab", "5000", "vocabulary: maximum size"),
    ("simulate", "true", "replace outcomes (and treatments when p is set) by simulation"),
    ("family", "continuous", "outcome family: continuous or binary"),
    ("b1", "10", "confounding strength (list allowed for benchmark)"),
    ("gamma", "1", "outcome noise sd (list allowed for benchmark)"),
    ("p", "none", "exogeneity weight, or none to keep observed treatment (list allowed for benchmark)"),
    ("representation", "catm", "catm, atm, nn, bow, lda, oracle-strata or oracle-propensity"),
    ("topics", "32", "topic model / network embedding size"),
    ("hidden", "128", "encoder hidden width"),
    ("epochs", "100", "training epochs"),
    ("batch", "64", "minibatch size"),
    ("lr", "0.003", "Adam learning rate"),
    ("supervision_weight", "1", "weight on the treatment and outcome terms"),
    ("binary_loss", "cross_entropy", "binary outcome head loss: cross_entropy or squared_error"),
    ("lda_alpha", "auto", "LDA document smoothing; auto is 1/topics"),
    ("lda_eta0", "0.01", "LDA topic-word smoothing"),
    ("lda_iterations", "500", "LDA Gibbs sweeps"),
    ("lda_burn_in", "250", "LDA sweeps discarded before averaging"),
    ("bow_normalize", "true", "divide bag-of-words counts by document length"),
    ("l2", "0.0001", "downstream ridge penalty"),
    ("reg_max_iter", "50000", "downstream gradient descent iteration cap"),
    ("reg_tol", "1e-6", "downstream gradient norm tolerance"),
    ("folds", "5", "cross-fitting folds; 0 or 1 predicts in-sample"),
    ("trim_lo", "0.03", "drop units with propensity below this"),
    ("trim_hi", "0.97", "drop units with propensity above this"),
    ("bootstrap", "10", "bootstrap replicates; 0 disables"),
    ("bootstrap_refit", "false", "refit the representation on every bootstrap replicate"),
    ("representations", "catm,atm,nn,bow,lda,oracle-strata,oracle-propensity", "benchmark: representations"),
    ("seeds", "3", "benchmark: replicate seeds per cell"),
    ("jobs", "0", "benchmark: worker threads; 0 uses all cores"),
    ("gradcheck_instances", "20", "gradcheck: random instances per rule"),
    ("gradcheck_tolerance", "1e-4", "gradcheck: relative error threshold"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the `key = value` lines of `text`. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(Error::Invalid(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => panic!("config key {key:?} is not in the key table"),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| Error::Invalid(format!("config key {key}: cannot parse {raw:?}: {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(Error::Invalid(format!("config key {key}: expected true or false, got {other:?}"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Invalid(format!("config key {key}: empty list")));
        }
        items
            .into_iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Invalid(format!("config key {key}: cannot parse {s:?}: {e}")))
            })
            .collect()
    }

    /// A number, or `none`.
    pub fn optional_f64(&self, key: &str) -> Result<Option<f64>> {
        parse_optional(key, self.get(key))
    }

    pub fn optional_f64_list(&self, key: &str) -> Result<Vec<Option<f64>>> {
        let items: Vec<&str> = self.get(key).split(',').map(str::trim).collect();
        items.into_iter().map(|s| parse_optional(key, s)).collect()
    }

    /// Every key in sorted order as `key = value` lines; parses back to the
    /// same configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn parse_optional(key: &str, s: &str) -> Result<Option<f64>> {
    match s {
        "none" | "" => Ok(None),
        _ => s
            .parse()
            .map(Some)
            .map_err(|e| Error::Invalid(format!("config key {key}: cannot parse {s:?}: {e}"))),
    }
}

//! Document ingestion, tokenization, vocabulary construction, sparse
//! bag-of-words counts and fold assignment.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// One input unit: text, binary treatment, optional outcome and stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
    pub treatment: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Tokens with fewer characters are dropped.
    pub min_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { min_len: 2 }
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && t.chars().count() >= config.min_len)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    index_to_token: Vec<String>,
    #[serde(skip)]
    token_to_index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. Duplicates are an error.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut token_to_index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab {
            index_to_token: tokens,
            token_to_index,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_token.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    /// SHA-256 over the ordered token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.index_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Keeps tokens with corpus frequency `>= min_count`, most frequent first
/// (ties lexicographic), truncated to `max_size`.
pub fn build_vocab<S: AsRef<str>>(docs: &[Vec<S>], min_count: usize, max_size: usize) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::Invalid("min_count must be at least 1".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for t in doc {
            *freq.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(max_size);
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned()).collect())
}

/// Sparse counts over a vocabulary, sorted by index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCounts {
    entries: Vec<(u32, u32)>,
}

impl SparseCounts {
    pub fn from_pairs(mut entries: Vec<(u32, u32)>) -> Self {
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable_by_key(|&(i, _)| i);
        let mut merged: Vec<(u32, u32)> = Vec::with_capacity(entries.len());
        for (i, c) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => merged.push((i, c)),
            }
        }
        SparseCounts { entries: merged }
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn get(&self, index: u32) -> u32 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0, |p| self.entries[p].1)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Token occurrences expanded in index order, e.g. `{0:2,1:1}` → `[0,0,1]`.
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .flat_map(|&(i, c)| std::iter::repeat_n(i as usize, c as usize))
    }
}

/// Counts in-vocabulary tokens; out-of-vocabulary tokens are dropped.
/// Returns the counts and the number of kept tokens.
pub fn to_bow<S: AsRef<str>>(doc: &[S], vocab: &Vocab) -> (SparseCounts, u64) {
    let mut counts: HashMap<u32, u32> = HashMap::new();
    let mut kept = 0;
    for t in doc {
        if let Some(i) = vocab.index(t.as_ref()) {
            *counts.entry(i as u32).or_default() += 1;
            kept += 1;
        }
    }
    (SparseCounts::from_pairs(counts.into_iter().collect()), kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowDoc {
    pub id: String,
    pub counts: SparseCounts,
    pub treatment: u8,
    pub outcome: Option<f64>,
    pub strata: Option<String>,
}

/// An immutable bag-of-words corpus with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct BowCorpus {
    docs: Vec<BowDoc>,
    vocab: Vocab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_count: 1,
            max_size: 5000,
        }
    }
}

impl BowCorpus {
    pub fn new(docs: Vec<BowDoc>, vocab: Vocab) -> Result<Self> {
        let mut seen = HashSet::with_capacity(docs.len());
        for d in &docs {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate id `{}`", d.id)));
            }
            if d.treatment > 1 {
                return Err(Error::Invalid(format!(
                    "doc `{}`: treatment {} not in {{0,1}}",
                    d.id, d.treatment
                )));
            }
            if let Some(&(i, _)) = d.counts.entries().last() {
                if i as usize >= vocab.len() {
                    return Err(Error::Invalid(format!(
                        "doc `{}`: token index {i} outside vocabulary of {}",
                        d.id,
                        vocab.len()
                    )));
                }
            }
        }
        Ok(BowCorpus { docs, vocab })
    }

    /// Tokenizes records, builds the vocabulary over all of them and counts.
    pub fn from_records(
        records: &[DocumentRecord],
        tokenizer: &TokenizerConfig,
        vocab_config: &VocabConfig,
    ) -> Result<Self> {
        let tokenized: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text, tokenizer)).collect();
        let vocab = build_vocab(&tokenized, vocab_config.min_count, vocab_config.max_size)?;
        let docs = records
            .iter()
            .zip(&tokenized)
            .map(|(r, toks)| BowDoc {
                id: r.id.clone(),
                counts: to_bow(toks, &vocab).0,
                treatment: r.treatment,
                outcome: r.outcome,
                strata: r.strata.clone(),
            })
            .collect();
        Self::new(docs, vocab)
    }

    pub fn docs(&self) -> &[BowDoc] {
        &self.docs
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn treatments(&self) -> Vec<u8> {
        self.docs.iter().map(|d| d.treatment).collect()
    }

    /// Outcomes, or `None` if any document lacks one.
    pub fn outcomes(&self) -> Option<Vec<f64>> {
        self.docs.iter().map(|d| d.outcome).collect()
    }

    pub fn strata(&self) -> Option<Vec<String>> {
        self.docs.iter().map(|d| d.strata.clone()).collect()
    }

    /// Copy with treatments and outcomes replaced (e.g. after simulation).
    pub fn with_labels(&self, treatment: &[u8], outcome: &[f64]) -> Result<Self> {
        if treatment.len() != self.len() || outcome.len() != self.len() {
            return Err(Error::shape(
                "with_labels",
                format!("{} docs, {} t, {} y", self.len(), treatment.len(), outcome.len()),
            ));
        }
        let docs = self
            .docs
            .iter()
            .zip(treatment.iter().zip(outcome))
            .map(|(d, (&t, &y))| BowDoc {
                treatment: t,
                outcome: Some(y),
                ..d.clone()
            })
            .collect();
        Self::new(docs, self.vocab.clone())
    }

    /// Dense count matrix `[idx.len() × V]`.
    pub fn count_matrix(&self, idx: &[usize]) -> Tensor {
        let v = self.vocab.len();
        let mut t = Tensor::zeros(idx.len(), v);
        for (r, &i) in idx.iter().enumerate() {
            let row = t.row_mut(r);
            for &(w, c) in self.docs[i].counts.entries() {
                row[w as usize] = f64::from(c);
            }
        }
        t
    }

    /// Counts normalized to sum one per row; empty documents give zero rows.
    pub fn normalized_matrix(&self, idx: &[usize]) -> Tensor {
        let mut t = self.count_matrix(idx);
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        t
    }

    /// Renders each document back to whitespace-separated tokens.
    pub fn to_records(&self) -> Vec<DocumentRecord> {
        self.docs
            .iter()
            .map(|d| DocumentRecord {
                id: d.id.clone(),
                text: d
                    .counts
                    .tokens()
                    .map(|i| self.vocab.index_to_token[i].as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
                treatment: d.treatment,
                outcome: d.outcome,
                strata: d.strata.clone(),
            })
            .collect()
    }
}

/// Fold index per document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    /// Units in fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    /// Units outside fold `f`, ascending.
    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != f).collect()
    }

    pub fn write_csv(&self, path: &Path, ids: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "fold"])?;
        for (id, f) in ids.iter().zip(&self.fold_of) {
            w.write_record([id.as_str(), &f.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Balanced random folds: a seeded shuffle dealt round-robin.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::Invalid(format!("fold count {k} out of range [2, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Reads line-delimited JSON records. Blank lines are skipped.
pub fn load_records(path: &Path) -> Result<Vec<DocumentRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<DocumentRecord>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<records>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.treatment > 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("treatment {} not in {{0,1}}", rec.treatment),
            });
        }
        if let Some(y) = rec.outcome {
            if !y.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "non-finite outcome".into(),
                });
            }
        }
        if let Some(first) = seen.insert(rec.id.clone(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate id `{}` (first seen on line {first})", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DocumentRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

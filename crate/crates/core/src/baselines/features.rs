use std::path::Path;

use crate::corpus::BowCorpus;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed document representations, one row per unit. When `intercept` is
/// set the last column is the constant 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub x: Tensor,
    pub intercept: bool,
}

impl FeatureMatrix {
    pub fn new(x: Tensor, intercept: bool) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::Invalid("non-finite feature".into()));
        }
        if intercept && x.cols() == 0 {
            return Err(Error::Invalid("intercept flag on an empty feature matrix".into()));
        }
        Ok(FeatureMatrix { x, intercept })
    }

    /// Appends a constant column.
    pub fn with_intercept(x: &Tensor) -> Result<Self> {
        let mut out = Tensor::zeros(x.rows(), x.cols() + 1);
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            row[..x.cols()].copy_from_slice(x.row(r));
            row[x.cols()] = 1.0;
        }
        Self::new(out, true)
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn cols(&self) -> usize {
        self.x.cols()
    }

    /// Writes `id,f0,f1,...` rows with a header.
    pub fn write_csv(&self, path: &Path, ids: &[String]) -> Result<()> {
        if ids.len() != self.rows() {
            return Err(Error::shape("write_csv", "id count differs from row count"));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.cols()).map(|j| {
            if self.intercept && j + 1 == self.cols() {
                "intercept".to_string()
            } else {
                format!("f{j}")
            }
        }));
        w.write_record(&header)?;
        for (r, id) in ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.x.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Bag-of-words rows (raw counts, or counts over the document total) plus an
/// intercept column.
pub fn bow_features(corpus: &BowCorpus, normalize: bool) -> Result<FeatureMatrix> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let x = if normalize {
        corpus.normalized_matrix(&idx)
    } else {
        corpus.count_matrix(&idx)
    };
    FeatureMatrix::with_intercept(&x)
}

/// Indicator columns for categorical labels, in sorted label order, without
/// an intercept.
pub fn one_hot_features<S: AsRef<str>>(labels: &[S]) -> Result<FeatureMatrix> {
    let mut levels: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut x = Tensor::zeros(labels.len(), levels.len());
    for (r, l) in labels.iter().enumerate() {
        let j = levels.binary_search(&l.as_ref()).expect("level present");
        x.set(r, j, 1.0);
    }
    FeatureMatrix::new(x, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BowDoc, SparseCounts, Vocab};

    #[test]
    fn bow_rows() {
        let vocab = Vocab::from_tokens(vec!["a".into(), "b".into()]).unwrap();
        let docs = vec![
            BowDoc {
                id: "1".into(),
                counts: SparseCounts::from_pairs(vec![(0, 2), (1, 1)]),
                treatment: 1,
                outcome: None,
                strata: None,
            },
            BowDoc {
                id: "2".into(),
                counts: SparseCounts::default(),
                treatment: 0,
                outcome: None,
                strata: None,
            },
        ];
        let c = BowCorpus::new(docs, vocab).unwrap();
        let f = bow_features(&c, true).unwrap();
        assert_eq!(f.rows(), 2);
        assert_eq!(f.x.row(0), &[2.0 / 3.0, 1.0 / 3.0, 1.0]);
        assert_eq!(f.x.row(1), &[0.0, 0.0, 1.0]);
        let raw = bow_features(&c, false).unwrap();
        assert_eq!(raw.x.row(0), &[2.0, 1.0, 1.0]);
    }

    #[test]
    fn one_hot_levels_sorted() {
        let f = one_hot_features(&["b", "a", "b"]).unwrap();
        assert_eq!(f.x.row(0), &[0.0, 1.0]);
        assert_eq!(f.x.row(1), &[1.0, 0.0]);
        assert!(!f.intercept);
    }
}

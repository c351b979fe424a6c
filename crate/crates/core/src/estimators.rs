//! Downstream ATT/NDE estimators over fitted nuisances, propensity trimming
//! and bootstrap standard deviations.
//!
//! The same formulas serve the ATT and the natural direct effect.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Per-unit propensity `ĝ` and conditional expected outcomes `Q̂(0,·)`, `Q̂(1,·)`,
/// aligned with the corpus by position.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisances {
    pub g: Vec<f64>,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
}

impl Nuisances {
    pub fn new(g: Vec<f64>, q0: Vec<f64>, q1: Vec<f64>) -> Result<Self> {
        if g.len() != q0.len() || g.len() != q1.len() {
            return Err(Error::shape(
                "nuisances",
                format!("g {}, q0 {}, q1 {}", g.len(), q0.len(), q1.len()),
            ));
        }
        if let Some((i, v)) = g.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Invalid(format!("propensity {v} at unit {i} not in (0,1)")));
        }
        if q0.iter().chain(&q1).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite expected outcome".into()));
        }
        Ok(Nuisances { g, q0, q1 })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn delta(&self, i: usize) -> f64 {
        self.q1[i] - self.q0[i]
    }

    /// Rows `idx`, in order; indices may repeat.
    pub fn subset(&self, idx: &[usize]) -> Nuisances {
        Nuisances {
            g: idx.iter().map(|&i| self.g[i]).collect(),
            q0: idx.iter().map(|&i| self.q0[i]).collect(),
            q1: idx.iter().map(|&i| self.q1[i]).collect(),
        }
    }
}

/// Maps a probability into the open unit interval `(ε, 1−ε)`.
pub fn open_unit(p: f64) -> f64 {
    p.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Unadjusted,
    QOnly,
    Plugin,
    PluginAllUnits,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Unadjusted,
        EstimatorKind::QOnly,
        EstimatorKind::Plugin,
        EstimatorKind::PluginAllUnits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Unadjusted => "unadjusted",
            EstimatorKind::QOnly => "q_only",
            EstimatorKind::Plugin => "plugin",
            EstimatorKind::PluginAllUnits => "plugin_all_units",
        }
    }

    pub fn is_adjusted(self) -> bool {
        self != EstimatorKind::Unadjusted
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown estimator `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub kind: EstimatorKind,
    pub psi_hat: f64,
    pub n_total: usize,
    pub n_kept: usize,
    pub bootstrap_sd: Option<f64>,
}

fn treated_count(t: &[u8]) -> Result<usize> {
    match t.iter().filter(|&&v| v == 1).count() {
        0 => Err(Error::EmptyArm(1)),
        n => Ok(n),
    }
}

fn check_len(op: &'static str, t: &[u8], n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::shape(op, format!("{} treatments for {n} units", t.len())));
    }
    Ok(())
}

/// `E[Y | T=1] − E[Y | T=0]`.
pub fn unadjusted(t: &[u8], y: &[f64]) -> Result<f64> {
    check_len("unadjusted", t, y.len())?;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&ti, &yi) in t.iter().zip(y) {
        if ti == 1 {
            s1 += yi;
            n1 += 1;
        } else {
            s0 += yi;
            n0 += 1;
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyArm(1));
    }
    if n0 == 0 {
        return Err(Error::EmptyArm(0));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Mean of `Q̂1 − Q̂0` over treated units.
pub fn psi_q_only(t: &[u8], nuis: &Nuisances) -> Result<f64> {
    check_len("psi_q_only", t, nuis.len())?;
    let n1 = treated_count(t)?;
    let s: f64 = (0..t.len()).filter(|&i| t[i] == 1).map(|i| nuis.delta(i)).sum();
    Ok(s / n1 as f64)
}

/// `(1/n) Σ (Q̂1 − Q̂0) ĝ  /  (1/n) Σ t`.
pub fn psi_plugin(t: &[u8], nuis: &Nuisances) -> Result<f64> {
    check_len("psi_plugin", t, nuis.len())?;
    let n1 = treated_count(t)?;
    let n = t.len() as f64;
    let num: f64 = (0..t.len()).map(|i| nuis.delta(i) * nuis.g[i]).sum::<f64>() / n;
    Ok(num / (n1 as f64 / n))
}

/// Unweighted mean of `Q̂1 − Q̂0` over all units.
pub fn psi_plugin_all_units(nuis: &Nuisances) -> Result<f64> {
    if nuis.is_empty() {
        return Err(Error::Invalid("no units".into()));
    }
    Ok((0..nuis.len()).map(|i| nuis.delta(i)).sum::<f64>() / nuis.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for TrimBounds {
    fn default() -> Self {
        TrimBounds { lo: 0.03, hi: 0.97 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrimReport {
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Keeps units with `lo ≤ ĝ ≤ hi`.
pub fn trim(nuis: &Nuisances, bounds: TrimBounds) -> Result<TrimReport> {
    let TrimBounds { lo, hi } = bounds;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(Error::Invalid(format!("trim bounds need 0 < lo < hi < 1, got [{lo}, {hi}]")));
    }
    let (kept, removed): (Vec<usize>, Vec<usize>) =
        (0..nuis.len()).partition(|&i| nuis.g[i] >= lo && nuis.g[i] <= hi);
    if kept.is_empty() {
        return Err(Error::AllTrimmed);
    }
    Ok(TrimReport { kept, removed })
}

/// Point estimate of `kind` on units `idx` (indices may repeat). Adjusted
/// estimators trim first; the unadjusted difference never does.
pub fn estimate_on(
    kind: EstimatorKind,
    idx: &[usize],
    t: &[u8],
    y: &[f64],
    nuis: &Nuisances,
    bounds: TrimBounds,
) -> Result<(f64, usize)> {
    let ts: Vec<u8> = idx.iter().map(|&i| t[i]).collect();
    if kind == EstimatorKind::Unadjusted {
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        return Ok((unadjusted(&ts, &ys)?, idx.len()));
    }
    let sub = nuis.subset(idx);
    let report = trim(&sub, bounds)?;
    let tk: Vec<u8> = report.kept.iter().map(|&i| ts[i]).collect();
    let nk = sub.subset(&report.kept);
    let psi = match kind {
        EstimatorKind::QOnly => psi_q_only(&tk, &nk)?,
        EstimatorKind::Plugin => psi_plugin(&tk, &nk)?,
        EstimatorKind::PluginAllUnits => psi_plugin_all_units(&nk)?,
        EstimatorKind::Unadjusted => unreachable!(),
    };
    Ok((psi, report.kept.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub sd: f64,
    pub replicates: Vec<f64>,
    pub dropped: usize,
}

/// Sample standard deviation (n−1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Resamples `n` units with replacement `replicates` times and returns the
/// standard deviation of `statistic` over the resamples. Replicate `r` draws
/// from seed `derive(seed, r)`; failed replicates are dropped with a warning.
pub fn bootstrap_sd<F>(n: usize, replicates: usize, seed: u64, statistic: F) -> Result<BootstrapResult>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if replicates < 2 {
        return Err(Error::Invalid(format!("need at least 2 bootstrap replicates, got {replicates}")));
    }
    if n == 0 {
        return Err(Error::Invalid("no units to resample".into()));
    }
    let results: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            statistic(&idx)
        })
        .collect();
    let mut values = Vec::with_capacity(replicates);
    let mut dropped = 0;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(v) => {
                log::warn!("bootstrap replicate {r} gave non-finite value {v}; dropped");
                dropped += 1;
            }
            Err(e) => {
                log::warn!("bootstrap replicate {r} failed: {e}; dropped");
                dropped += 1;
            }
        }
    }
    if values.len() < 2 {
        return Err(Error::Invalid(format!(
            "only {} of {replicates} bootstrap replicates succeeded",
            values.len()
        )));
    }
    Ok(BootstrapResult {
        sd: sample_sd(&values),
        replicates: values,
        dropped,
    })
}

/// Every estimator kind on the full sample, each with a bootstrap sd when
/// `replicates > 0`. Estimator `k` bootstraps with seed `derive(seed, k)`.
pub fn estimate_all(
    t: &[u8],
    y: &[f64],
    nuis: &Nuisances,
    bounds: TrimBounds,
    replicates: usize,
    seed: u64,
) -> Result<Vec<EffectEstimate>> {
    check_len("estimate_all", t, nuis.len())?;
    check_len("estimate_all", t, y.len())?;
    let all: Vec<usize> = (0..t.len()).collect();
    EstimatorKind::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let (psi_hat, n_kept) = estimate_on(kind, &all, t, y, nuis, bounds)?;
            let bootstrap_sd = if replicates > 0 {
                let b = bootstrap_sd(t.len(), replicates, seed::derive(seed, k as u64), |idx| {
                    estimate_on(kind, idx, t, y, nuis, bounds).map(|r| r.0)
                })?;
                Some(b.sd)
            } else {
                None
            };
            Ok(EffectEstimate {
                kind,
                psi_hat,
                n_total: t.len(),
                n_kept,
                bootstrap_sd,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nuis(g: &[f64], dq: &[f64]) -> Nuisances {
        Nuisances::new(g.to_vec(), vec![0.0; dq.len()], dq.to_vec()).unwrap()
    }

    #[test]
    fn unadjusted_examples() {
        assert_eq!(unadjusted(&[1, 0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(unadjusted(&[1, 1, 0, 0], &[2.0, 4.0, 1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(unadjusted(&[1, 0, 1], &[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(unadjusted(&[1, 1], &[1.0, 2.0]), Err(Error::EmptyArm(0))));
    }

    #[test]
    fn q_only_examples() {
        let n = nuis(&[0.5; 3], &[0.2, 0.4, 99.0]);
        assert!((psi_q_only(&[1, 1, 0], &n).unwrap() - 0.3).abs() < 1e-15);
        let c = nuis(&[0.5; 4], &[0.7; 4]);
        assert!((psi_q_only(&[1, 0, 1, 0], &c).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(psi_q_only(&[0, 0, 0], &n), Err(Error::EmptyArm(1))));
    }

    #[test]
    fn plugin_examples() {
        let n = nuis(&[0.9, 0.8, 0.1, 0.2], &[0.2, 0.4, 0.6, 0.8]);
        // (0.18 + 0.32 + 0.06 + 0.16)/4 / 0.5
        assert!((psi_plugin(&[1, 1, 0, 0], &n).unwrap() - 0.36).abs() < 1e-15);
        assert!((psi_plugin_all_units(&n).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trimming_is_closed() {
        let n = nuis(&[0.99, 0.5, 0.03, 0.97, 0.02, 0.975], &[0.0; 6]);
        let r = trim(&n, TrimBounds::default()).unwrap();
        assert_eq!(r.kept, vec![1, 2, 3]);
        assert_eq!(r.removed, vec![0, 4, 5]);
        let n = nuis(&[0.99, 0.01], &[0.0; 2]);
        assert!(matches!(trim(&n, TrimBounds::default()), Err(Error::AllTrimmed)));
        assert!(trim(&n, TrimBounds { lo: 0.5, hi: 0.4 }).is_err());
    }

    #[test]
    fn nuisances_reject_boundary_propensity() {
        assert!(Nuisances::new(vec![1.0], vec![0.0], vec![0.0]).is_err());
        assert!(Nuisances::new(vec![0.5], vec![0.0], vec![]).is_err());
    }

    #[test]
    fn bootstrap_of_constant_is_zero() {
        let b = bootstrap_sd(50, 10, 1, |_| Ok(4.2)).unwrap();
        assert!(b.sd < 1e-12);
        assert_eq!(b.replicates.len(), 10);
        let again = bootstrap_sd(50, 10, 1, |idx| Ok(idx[0] as f64)).unwrap();
        let twice = bootstrap_sd(50, 10, 1, |idx| Ok(idx[0] as f64)).unwrap();
        assert_eq!(again, twice);
    }

    #[test]
    fn failed_replicates_are_dropped() {
        let b = bootstrap_sd(20, 10, 3, |idx| {
            if idx[0] % 2 == 0 {
                Err(Error::AllTrimmed)
            } else {
                Ok(idx[1] as f64)
            }
        });
        if let Ok(b) = b {
            assert_eq!(b.replicates.len() + b.dropped, 10);
        }
        assert!(bootstrap_sd(20, 10, 3, |_| Err(Error::AllTrimmed)).is_err());
    }

    #[test]
    fn estimate_all_covers_every_kind() {
        let t = [1, 0, 1, 0, 1, 0];
        let y = [2.0, 0.0, 3.0, 1.0, 2.5, 0.5];
        let n = nuis(&[0.6, 0.4, 0.99, 0.3, 0.5, 0.5], &[1.0, 1.0, 9.0, 1.0, 1.0, 1.0]);
        let est = estimate_all(&t, &y, &n, TrimBounds::default(), 0, 0).unwrap();
        assert_eq!(est.len(), 4);
        assert_eq!(est[0].n_kept, 6);
        assert_eq!(est[1].n_kept, 5);
        assert!((est[1].psi_hat - 1.0).abs() < 1e-15);
        assert!(est.iter().all(|e| e.bootstrap_sd.is_none()));
    }
}

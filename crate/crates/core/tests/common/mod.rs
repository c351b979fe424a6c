//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use catm_core::Tensor;

/// `ln ∫ N(r; 0, I) Π_v (θ(r)ᵀβ)_v^{c_v} dr` for K = 2, where θ depends on
/// `d = r₁ − r₂ ~ N(0, 2)` only: a one-dimensional trapezoid rule in log
/// space.
pub fn log_marginal_k2(counts: &[(u32, u32)], beta: &Tensor) -> f64 {
    let (lo, hi, steps) = (-30.0f64, 30.0f64, 200_000usize);
    let h = (hi - lo) / steps as f64;
    let log_terms: Vec<f64> = (0..=steps)
        .map(|i| {
            let d = lo + i as f64 * h;
            let s = 1.0 / (1.0 + (-d).exp());
            let log_prior = -d * d / 4.0 - 0.5 * (4.0 * std::f64::consts::PI).ln();
            let ll: f64 = counts
                .iter()
                .map(|&(w, c)| {
                    let p = s * beta.get(0, w as usize) + (1.0 - s) * beta.get(1, w as usize);
                    f64::from(c) * p.ln()
                })
                .sum();
            let weight = if i == 0 || i == steps { 0.5 } else { 1.0 };
            log_prior + ll + (weight * h).ln()
        })
        .collect();
    let m = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + log_terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Treated-weighted average of within-stratum arm differences.
pub fn strata_att(strata: &[usize], t: &[u8], y: &[f64]) -> f64 {
    let mut cells: BTreeMap<usize, [(f64, usize); 2]> = BTreeMap::new();
    for ((&s, &ti), &yi) in strata.iter().zip(t).zip(y) {
        let c = &mut cells.entry(s).or_insert([(0.0, 0); 2])[ti as usize];
        c.0 += yi;
        c.1 += 1;
    }
    let n1: usize = t.iter().filter(|&&v| v == 1).count();
    cells
        .values()
        .map(|[c0, c1]| c1.1 as f64 / n1 as f64 * (c1.0 / c1.1 as f64 - c0.0 / c0.1 as f64))
        .sum()
}

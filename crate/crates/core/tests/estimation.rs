use std::collections::BTreeMap;

use catm_core::baselines::{fit_downstream_nuisances, one_hot_features, DownstreamConfig};
use catm_core::estimators::{
    bootstrap_sd, estimate_on, psi_plugin, psi_plugin_all_units, psi_q_only, trim, unadjusted, EstimatorKind,
    Nuisances, TrimBounds,
};
use catm_core::seed;
use catm_core::simulate::{simulate_outcome, strata_propensity, SimConfig};
use catm_core::OutcomeFamily;
use proptest::prelude::*;
use rand::Rng;

mod common;
use common::strata_att;

fn nuisances(n: usize) -> impl Strategy<Value = (Vec<u8>, Nuisances)> {
    (
        prop::collection::vec(0u8..=1, n),
        prop::collection::vec(0.001f64..0.999, n),
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(-5.0f64..5.0, n),
    )
        .prop_filter("needs a treated unit", |(t, ..)| t.contains(&1))
        .prop_map(|(t, g, q0, q1)| (t, Nuisances::new(g, q0, q1).unwrap()))
}

proptest! {
    #[test]
    fn q_only_ignores_control_predictions((t, nu) in nuisances(30), shift in -10.0f64..10.0) {
        let mut moved = nu.clone();
        for i in 0..t.len() {
            if t[i] == 0 {
                moved.q0[i] += shift;
                moved.q1[i] -= shift;
            }
        }
        prop_assert_eq!(psi_q_only(&t, &nu).unwrap(), psi_q_only(&t, &moved).unwrap());
    }

    #[test]
    fn constant_propensity_plugin_is_all_units_mean((t, nu) in nuisances(40)) {
        let tbar = t.iter().map(|&v| f64::from(v)).sum::<f64>() / t.len() as f64;
        let flat = Nuisances::new(vec![tbar; t.len()], nu.q0.clone(), nu.q1.clone()).unwrap();
        let a = psi_plugin(&t, &flat).unwrap();
        let b = psi_plugin_all_units(&flat).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn trimming_is_monotone_in_the_interval(
        (_, nu) in nuisances(50),
        lo in 0.01f64..0.3,
        hi in 0.7f64..0.99,
        widen in 0.0f64..0.009,
    ) {
        let narrow = trim(&nu, TrimBounds { lo, hi });
        let wide = trim(&nu, TrimBounds { lo: lo - widen, hi: (hi + widen).min(0.999) });
        if let Ok(n) = narrow {
            let w = wide.unwrap();
            prop_assert!(n.kept.iter().all(|i| w.kept.contains(i)));
            prop_assert!(w.removed.len() <= n.removed.len());
            prop_assert_eq!(n.kept.len() + n.removed.len(), nu.len());
        }
    }

    #[test]
    fn trimming_drops_exactly_the_outside_units((_, nu) in nuisances(60)) {
        let rep = trim(&nu, TrimBounds::default());
        let outside: Vec<usize> = (0..nu.len()).filter(|&i| nu.g[i] < 0.03 || nu.g[i] > 0.97).collect();
        match rep {
            Ok(r) => prop_assert_eq!(r.removed, outside),
            Err(_) => prop_assert_eq!(outside.len(), nu.len()),
        }
    }

    #[test]
    fn bootstrap_sd_is_nonnegative_and_reproducible(seed in 0u64..1000) {
        let data: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let stat = |idx: &[usize]| Ok(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64);
        let a = bootstrap_sd(data.len(), 10, seed, stat).unwrap();
        prop_assert!(a.sd >= 0.0);
        prop_assert_eq!(a, bootstrap_sd(data.len(), 10, seed, stat).unwrap());
    }
}

#[test]
fn plugin_on_strata_means_matches_brute_force() {
    let mut rng = seed::rng(21);
    let n = 3000;
    let strata: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let t: Vec<u8> = strata
        .iter()
        .map(|&s| u8::from(rng.random::<f64>() < 0.15 + 0.12 * s as f64))
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| f64::from(t[i]) * 1.3 + strata[i] as f64 + rng.random::<f64>())
        .collect();
    // oracle nuisances: within-stratum propensity and arm means
    let labels: Vec<String> = strata.iter().map(|s| s.to_string()).collect();
    let sp = strata_propensity(&labels, &t).unwrap();
    let mut sums: BTreeMap<(usize, u8), (f64, f64)> = BTreeMap::new();
    for i in 0..n {
        let e = sums.entry((strata[i], t[i])).or_default();
        e.0 += y[i];
        e.1 += 1.0;
    }
    let mean = |s: usize, a: u8| {
        let (tot, cnt) = sums[&(s, a)];
        tot / cnt
    };
    let nu = Nuisances::new(
        sp.by_unit.clone(),
        strata.iter().map(|&s| mean(s, 0)).collect(),
        strata.iter().map(|&s| mean(s, 1)).collect(),
    )
    .unwrap();
    let want = strata_att(&strata, &t, &y);
    let got = psi_plugin(&t, &nu).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    // q_only agrees here as well: ĝ is the exact treated share
    assert!((psi_q_only(&t, &nu).unwrap() - want).abs() < 1e-12);
}

#[test]
fn downstream_one_hot_fit_reproduces_brute_force() {
    let mut rng = seed::rng(8);
    let n = 2000;
    let strata: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let t: Vec<u8> = strata
        .iter()
        .map(|&s| u8::from(rng.random::<f64>() < 0.2 + 0.2 * s as f64))
        .collect();
    let y: Vec<f64> = (0..n).map(|i| f64::from(t[i]) + 2.0 * strata[i] as f64 + rng.random::<f64>()).collect();
    let labels: Vec<String> = strata.iter().map(|s| s.to_string()).collect();
    let f = one_hot_features(&labels).unwrap();
    let cfg = DownstreamConfig {
        l2: 0.0,
        tol: 1e-10,
        ..DownstreamConfig::default()
    };
    let (nu, _) = fit_downstream_nuisances(&f, &t, &y, OutcomeFamily::Continuous, &cfg, None).unwrap();
    let got = psi_plugin(&t, &nu).unwrap();
    assert!((got - strata_att(&strata, &t, &y)).abs() < 1e-6);
}

#[test]
fn unadjusted_ignores_trimming() {
    let t = [1, 0, 1, 0];
    let y = [3.0, 1.0, 2.0, 0.0];
    let nu = Nuisances::new(vec![0.01, 0.5, 0.5, 0.99], vec![0.0; 4], vec![1.0; 4]).unwrap();
    let all = [0, 1, 2, 3];
    let (psi, kept) = estimate_on(EstimatorKind::Unadjusted, &all, &t, &y, &nu, TrimBounds::default()).unwrap();
    assert_eq!((psi, kept), (unadjusted(&t, &y).unwrap(), 4));
    let (_, kept) = estimate_on(EstimatorKind::Plugin, &all, &t, &y, &nu, TrimBounds::default()).unwrap();
    assert_eq!(kept, 2);
}

#[test]
fn bootstrap_sd_is_stable_in_replicate_count() {
    let mut rng = seed::rng(3);
    let n = 1000;
    let pi: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
    let t: Vec<u8> = pi.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
    let y = simulate_outcome(&t, &pi, &SimConfig::default(), &mut rng).unwrap();
    let stat = |idx: &[usize]| {
        let ts: Vec<u8> = idx.iter().map(|&i| t[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        unadjusted(&ts, &ys)
    };
    let ten = bootstrap_sd(n, 10, 1, stat).unwrap().sd;
    let twenty = bootstrap_sd(n, 20, 1, stat).unwrap().sd;
    assert!((twenty - ten).abs() < 0.5 * ten, "{ten} vs {twenty}");
}

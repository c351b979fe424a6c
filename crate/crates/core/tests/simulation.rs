use catm_core::baselines::{fit_downstream_nuisances, one_hot_features, DownstreamConfig};
use catm_core::estimators::psi_plugin;
use catm_core::seed;
use catm_core::simulate::{
    binary_outcome_prob, generate_synthetic_corpus, ground_truth_effect, mix_exogenous, simulate_dataset,
    simulate_exogenous_treatment, simulate_outcome, strata_propensity, SimConfig, SyntheticCorpusConfig,
};
use catm_core::tensor::sigmoid;
use catm_core::OutcomeFamily;
use proptest::prelude::*;
use rand::Rng;

fn binary(b1: f64) -> SimConfig {
    SimConfig {
        b1,
        family: OutcomeFamily::Binary,
        ..SimConfig::default()
    }
}

#[test]
fn binary_ground_truth_matches_potential_outcome_draws() {
    // Monte Carlo over both potential outcomes of every treated unit
    let mut rng = seed::rng(17);
    let pi: Vec<f64> = (0..50).map(|_| rng.random_range(0.05..0.95)).collect();
    let t = vec![1u8; pi.len()];
    let cfg = binary(3.0);
    let draws = 20_000;
    let mut diff = 0.0;
    for _ in 0..draws {
        let y1 = simulate_outcome(&t, &pi, &cfg, &mut rng).unwrap();
        let y0 = simulate_outcome(&vec![0; pi.len()], &pi, &cfg, &mut rng).unwrap();
        diff += y1.iter().zip(&y0).map(|(a, b)| a - b).sum::<f64>() / pi.len() as f64;
    }
    let mc = diff / draws as f64;
    let exact = ground_truth_effect(&t, &pi, &cfg).unwrap();
    // sd of one replicate's mean difference is below 0.1
    assert!((mc - exact).abs() < 4.0 * 0.1 / (draws as f64).sqrt(), "{mc} vs {exact}");
}

#[test]
fn binary_ground_truth_without_confounding() {
    let want = 1.0 / (1.0 + (-0.25f64).exp()) - 0.5;
    assert!((want - 0.0621765).abs() < 1e-7);
    let got = ground_truth_effect(&[1, 1, 0], &[0.3, 0.9, 0.1], &binary(0.0)).unwrap();
    assert!((got - want).abs() < 1e-15);
    assert!((binary_outcome_prob(1, 0.2, 5.0) - sigmoid(0.25)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn exogenous_mixture_moves_monotonically_away(g in 0.05f64..0.95, xi in -3.0f64..3.0, p1 in 0.0f64..1.0, p2 in 0.0f64..1.0) {
        let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
        let a = mix_exogenous(&[g], lo, &[xi]).unwrap()[0];
        let b = mix_exogenous(&[g], hi, &[xi]).unwrap()[0];
        let target = sigmoid(xi);
        // the logit interpolates linearly, so distance to each endpoint is monotone
        prop_assert!((b - target).abs() <= (a - target).abs() + 1e-12);
        prop_assert!((b - g).abs() + 1e-12 >= (a - g).abs());
    }

    #[test]
    fn continuous_ground_truth_is_one(t in prop::collection::vec(0u8..=1, 1..30), b1 in -50.0f64..50.0) {
        prop_assume!(t.contains(&1));
        let pi = vec![0.5; t.len()];
        let cfg = SimConfig { b1, ..SimConfig::default() };
        prop_assert_eq!(ground_truth_effect(&t, &pi, &cfg).unwrap(), 1.0);
    }
}

#[test]
fn exogeneity_weakens_the_text_signal() {
    let mut rng = seed::rng(1);
    let g: Vec<f64> = (0..4000).map(|_| rng.random_range(0.1..0.9)).collect();
    let corr = |p: f64| {
        let (gs, _) = simulate_exogenous_treatment(&g, p, 5).unwrap();
        let m1 = g.iter().sum::<f64>() / g.len() as f64;
        let m2 = gs.iter().sum::<f64>() / gs.len() as f64;
        let cov: f64 = g.iter().zip(&gs).map(|(a, b)| (a - m1) * (b - m2)).sum();
        let v1: f64 = g.iter().map(|a| (a - m1).powi(2)).sum();
        let v2: f64 = gs.iter().map(|b| (b - m2).powi(2)).sum();
        cov / (v1 * v2).sqrt()
    };
    let cs: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&p| corr(p)).collect();
    assert!((cs[0] - 1.0).abs() < 1e-12);
    assert!(cs.windows(2).all(|w| w[1] < w[0]), "{cs:?}");
    assert!(cs[4].abs() < 0.05);
}

#[test]
fn noise_scale_is_a_standard_deviation() {
    let mut rng = seed::rng(9);
    let n = 50_000;
    let t = vec![0u8; n];
    let pi = vec![0.5; n];
    let y = simulate_outcome(&t, &pi, &SimConfig { gamma: 4.0, ..SimConfig::default() }, &mut rng).unwrap();
    let var = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    assert!((var.sqrt() - 4.0).abs() < 0.05);
}

#[test]
fn synthetic_strata_follow_the_propensity_table() {
    let cfg = SyntheticCorpusConfig {
        docs: 5000,
        seed: 2,
        ..SyntheticCorpusConfig::default()
    };
    let c = generate_synthetic_corpus(&cfg).unwrap();
    let strata = c.strata().unwrap();
    let sp = strata_propensity(&strata, &c.treatments()).unwrap();
    for (k, want) in cfg.propensity.iter().enumerate() {
        let got = sp.by_stratum[&format!("s{k}")];
        assert!((got - want).abs() < 0.05, "stratum {k}: {got} vs {want}");
    }
    assert_eq!(c, generate_synthetic_corpus(&cfg).unwrap());
}

/// Plug-in error with oracle strata adjustment on `n` units, averaged over
/// replicate seeds.
fn oracle_error(n: usize, reps: u64) -> f64 {
    (0..reps)
        .map(|r| {
            let c = generate_synthetic_corpus(&SyntheticCorpusConfig {
                docs: n,
                vocab: 20,
                doc_len: 5,
                seed: seed::derive(100, r),
                ..SyntheticCorpusConfig::default()
            })
            .unwrap();
            let sim = simulate_dataset(&c, &SimConfig { seed: r, ..SimConfig::default() }).unwrap();
            let f = one_hot_features(&c.strata().unwrap()).unwrap();
            let (nu, _) = fit_downstream_nuisances(
                &f,
                &sim.treatment,
                &sim.outcome,
                OutcomeFamily::Continuous,
                &DownstreamConfig { l2: 0.0, ..DownstreamConfig::default() },
                None,
            )
            .unwrap();
            (psi_plugin(&sim.treatment, &nu).unwrap() - sim.psi_true).abs()
        })
        .sum::<f64>()
        / reps as f64
}

#[test]
fn oracle_error_shrinks_with_sample_size() {
    let small = oracle_error(1_000, 20);
    let large = oracle_error(10_000, 20);
    // the root-n rate predicts a factor of about 3.2
    assert!(large <= small / 2.0, "{small} -> {large}");
}

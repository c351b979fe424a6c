//! Penalized linear and logistic regression by full-batch accelerated
//! gradient descent, and the downstream nuisance fits built on them.

use super::FeatureMatrix;
use crate::atm::OutcomeFamily;
use crate::corpus::FoldAssignment;
use crate::error::{Error, Result};
use crate::estimators::{open_unit, Nuisances};
use crate::tensor::{bce_with_logit, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownstreamConfig {
    /// Ridge penalty on every non-intercept coefficient (mean-loss scale).
    pub l2: f64,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            l2: 1e-4,
            tol: 1e-6,
            max_iter: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub coef: Vec<f64>,
}

impl LinearModel {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Loss {
    Squared,
    Logistic,
}

fn rows_of(x: &Tensor, rows: &[usize]) -> Tensor {
    x.select_rows(rows)
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_spectral_norm(x: &Tensor) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut xv = vec![0.0; n];
        for (r, o) in xv.iter_mut().enumerate() {
            *o = x.row(r).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let mut w = vec![0.0; d];
        for (r, &s) in xv.iter().enumerate() {
            for (wj, xj) in w.iter_mut().zip(x.row(r)) {
                *wj += s * xj;
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm / n as f64;
        v = w.into_iter().map(|a| a / norm).collect();
        if (next - lambda).abs() <= 1e-10 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}

fn gradient(x: &Tensor, y: &[f64], w: &[f64], penalized: &[bool], l2: f64, loss: Loss, out: &mut [f64]) -> f64 {
    let n = x.rows() as f64;
    out.iter_mut().for_each(|g| *g = 0.0);
    let mut obj = 0.0;
    for (r, &yr) in y.iter().enumerate() {
        let row = x.row(r);
        let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
        let resid = match loss {
            Loss::Squared => {
                obj += 0.5 * (z - yr) * (z - yr);
                z - yr
            }
            Loss::Logistic => {
                obj += bce_with_logit(z, yr);
                sigmoid(z) - yr
            }
        };
        for (g, xj) in out.iter_mut().zip(row) {
            *g += resid * xj;
        }
    }
    obj /= n;
    for j in 0..w.len() {
        out[j] /= n;
        if penalized[j] {
            out[j] += l2 * w[j];
            obj += 0.5 * l2 * w[j] * w[j];
        }
    }
    obj
}

/// Nesterov-accelerated gradient descent with a diagonal step that majorizes
/// the Hessian (`L_data + l2` on penalized coordinates, `L_data` elsewhere)
/// and function-value restarts.
fn fit(
    x: &Tensor,
    y: &[f64],
    intercept: bool,
    init: Option<&[f64]>,
    config: &DownstreamConfig,
    loss: Loss,
) -> Result<(LinearModel, FitReport)> {
    let d = x.cols();
    if x.rows() != y.len() {
        return Err(Error::shape("regression", format!("{} rows, {} targets", x.rows(), y.len())));
    }
    if x.rows() == 0 {
        return Err(Error::Invalid("no rows to fit".into()));
    }
    if !(config.l2 >= 0.0) {
        return Err(Error::Invalid("l2 must be nonnegative".into()));
    }
    let penalized: Vec<bool> = (0..d).map(|j| !(intercept && j + 1 == d)).collect();
    let curvature = match loss {
        Loss::Squared => 1.0,
        Loss::Logistic => 0.25,
    };
    let l_data = (curvature * gram_spectral_norm(x) * 1.01).max(1e-12);
    let step: Vec<f64> = penalized
        .iter()
        .map(|&p| 1.0 / if p { l_data + config.l2 } else { l_data })
        .collect();

    let mut w: Vec<f64> = match init {
        Some(v) if v.len() == d => v.to_vec(),
        Some(v) => return Err(Error::shape("regression", format!("init of length {}, {d} features", v.len()))),
        None => vec![0.0; d],
    };
    let mut look = w.clone();
    let mut g = vec![0.0; d];
    let mut momentum = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    let mut report = FitReport {
        converged: false,
        iterations: 0,
        grad_norm: f64::INFINITY,
    };
    for it in 0..config.max_iter {
        let obj = gradient(x, y, &look, &penalized, config.l2, loss, &mut g);
        let gnorm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        report.iterations = it + 1;
        report.grad_norm = gnorm;
        if gnorm < config.tol {
            w = look;
            report.converged = true;
            break;
        }
        if obj > prev_obj {
            // restart momentum from the last accepted iterate
            momentum = 1.0;
            look.copy_from_slice(&w);
            prev_obj = f64::INFINITY;
            continue;
        }
        prev_obj = obj;
        let next: Vec<f64> = look.iter().zip(&g).zip(&step).map(|((v, gj), s)| v - s * gj).collect();
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / m_next;
        for j in 0..d {
            look[j] = next[j] + beta * (next[j] - w[j]);
        }
        w = next;
        momentum = m_next;
    }
    if !report.converged {
        log::warn!(
            "regression stopped at iteration cap {} with gradient norm {:.3e}",
            config.max_iter,
            report.grad_norm
        );
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("regression diverged".into()));
    }
    Ok((LinearModel { coef: w }, report))
}

/// Ridge-penalized least squares; the intercept column (if flagged) is not
/// penalized.
pub fn fit_linear(
    x: &Tensor,
    y: &[f64],
    intercept: bool,
    init: Option<&[f64]>,
    config: &DownstreamConfig,
) -> Result<(LinearModel, FitReport)> {
    fit(x, y, intercept, init, config, Loss::Squared)
}

/// Ridge-penalized logistic regression on targets in `{0,1}`.
pub fn fit_logistic(
    x: &Tensor,
    y: &[f64],
    intercept: bool,
    init: Option<&[f64]>,
    config: &DownstreamConfig,
) -> Result<(LinearModel, FitReport)> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("logistic targets must be 0 or 1".into()));
    }
    fit(x, y, intercept, init, config, Loss::Logistic)
}

/// Fits `ĝ` (logistic) and per-arm `Q̂` (linear, or logistic for binary
/// outcomes) on fixed features. With folds, each unit is predicted by models
/// fit on the other folds.
pub fn fit_downstream_nuisances(
    features: &FeatureMatrix,
    t: &[u8],
    y: &[f64],
    family: OutcomeFamily,
    config: &DownstreamConfig,
    folds: Option<&FoldAssignment>,
) -> Result<(Nuisances, Vec<FitReport>)> {
    let n = features.rows();
    if t.len() != n || y.len() != n {
        return Err(Error::shape(
            "fit_downstream_nuisances",
            format!("{n} feature rows, {} treatments, {} outcomes", t.len(), y.len()),
        ));
    }
    if t.iter().all(|&v| v == t[0]) {
        return Err(Error::DegenerateTreatment);
    }
    let x = &features.x;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = match folds {
        Some(f) => {
            if f.fold_of.len() != n {
                return Err(Error::shape("fit_downstream_nuisances", "fold labels differ from rows"));
            }
            (0..f.k).map(|k| (f.complement(k), f.members(k))).collect()
        }
        None => vec![((0..n).collect(), (0..n).collect())],
    };

    let (mut g, mut q0, mut q1) = (vec![f64::NAN; n], vec![f64::NAN; n], vec![f64::NAN; n]);
    let mut reports = Vec::new();
    for (train, test) in splits {
        let tt: Vec<f64> = train.iter().map(|&i| f64::from(t[i])).collect();
        if tt.iter().all(|&v| v == tt[0]) {
            return Err(Error::DegenerateTreatment);
        }
        let (gm, gr) = fit_logistic(&rows_of(x, &train), &tt, features.intercept, None, config)?;
        reports.push(gr);

        let mut arm_models = Vec::with_capacity(2);
        for arm in [0u8, 1] {
            let rows: Vec<usize> = train.iter().copied().filter(|&i| t[i] == arm).collect();
            if rows.is_empty() {
                return Err(Error::EmptyArm(arm));
            }
            let ya: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let xa = rows_of(x, &rows);
            let (m, r) = match family {
                OutcomeFamily::Continuous => fit_linear(&xa, &ya, features.intercept, None, config)?,
                OutcomeFamily::Binary => fit_logistic(&xa, &ya, features.intercept, None, config)?,
            };
            reports.push(r);
            arm_models.push(m);
        }
        let link = |z: f64| match family {
            OutcomeFamily::Continuous => z,
            OutcomeFamily::Binary => sigmoid(z),
        };
        for &i in &test {
            let row = x.row(i);
            g[i] = open_unit(sigmoid(gm.linear_predictor(row)));
            q0[i] = link(arm_models[0].linear_predictor(row));
            q1[i] = link(arm_models[1].linear_predictor(row));
        }
    }
    Ok((Nuisances::new(g, q0, q1)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::one_hot_features;
    use crate::corpus::split_folds;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn linear_fit_recovers_exact_coefficients() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 1.0], vec![3.0, 1.0], vec![5.0, 1.0]]).unwrap();
        let y: Vec<f64> = (0..4).map(|r| 2.0 * x.get(r, 0) - 1.0).collect();
        let cfg = DownstreamConfig {
            l2: 0.0,
            tol: 1e-10,
            ..DownstreamConfig::default()
        };
        let (m, rep) = fit_linear(&x, &y, true, None, &cfg).unwrap();
        assert!(rep.converged);
        assert!((m.coef[0] - 2.0).abs() < 1e-8);
        assert!((m.coef[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn strata_one_hot_recovers_arm_means() {
        let mut rng = seed::rng(1);
        let n = 400;
        let strata: Vec<String> = (0..n).map(|i| format!("s{}", i % 4)).collect();
        let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
        let means = [0.3, -1.0, 2.0, 0.7];
        let y: Vec<f64> = (0..n).map(|i| 1.5 * f64::from(t[i]) + means[i % 4]).collect();
        let f = one_hot_features(&strata).unwrap();
        let cfg = DownstreamConfig {
            l2: 0.0,
            tol: 1e-10,
            ..DownstreamConfig::default()
        };
        let (nu, _) = fit_downstream_nuisances(&f, &t, &y, OutcomeFamily::Continuous, &cfg, None).unwrap();
        for i in 0..n {
            assert!((nu.q0[i] - means[i % 4]).abs() < 1e-3);
            assert!((nu.q1[i] - means[i % 4] - 1.5).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_treatment_is_rejected() {
        let f = one_hot_features(&["a", "b"]).unwrap();
        let err = fit_downstream_nuisances(&f, &[1, 1], &[0.0, 1.0], OutcomeFamily::Continuous, &DownstreamConfig::default(), None);
        assert!(matches!(err, Err(Error::DegenerateTreatment)));
    }

    #[test]
    fn heavy_penalty_gives_treated_fraction() {
        let mut rng = seed::rng(2);
        let n = 200;
        let x = Tensor::randn(n, 3, 1.0, &mut rng);
        let f = FeatureMatrix::with_intercept(&x).unwrap();
        let t: Vec<u8> = (0..n).map(|i| u8::from(x.get(i, 0) > 0.3)).collect();
        let y = vec![0.0; n];
        let frac = t.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let cfg = DownstreamConfig {
            l2: 1e12,
            ..DownstreamConfig::default()
        };
        let (nu, reps) = fit_downstream_nuisances(&f, &t, &y, OutcomeFamily::Continuous, &cfg, None).unwrap();
        assert!(reps.iter().all(|r| r.converged));
        for g in nu.g {
            assert!((g - frac).abs() < 1e-6, "{g} vs {frac}");
        }
    }

    #[test]
    fn logistic_loss_is_convex_in_practice() {
        let mut rng = seed::rng(7);
        let n = 300;
        let x = Tensor::randn(n, 4, 1.0, &mut rng);
        let f = FeatureMatrix::with_intercept(&x).unwrap();
        let t: Vec<f64> = (0..n)
            .map(|i| f64::from(u8::from(rng.random::<f64>() < sigmoid(x.get(i, 0) - 0.5 * x.get(i, 2)))))
            .collect();
        let cfg = DownstreamConfig::default();
        let preds: Vec<Vec<f64>> = (0..5)
            .map(|s| {
                let mut r = seed::rng(100 + s);
                let init: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
                let (m, rep) = fit_logistic(&f.x, &t, true, Some(&init), &cfg).unwrap();
                assert!(rep.converged);
                (0..n).map(|i| sigmoid(m.linear_predictor(f.x.row(i)))).collect()
            })
            .collect();
        for p in &preds[1..] {
            for (a, b) in p.iter().zip(&preds[0]) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn cross_fitted_predictions_cover_every_unit() {
        let mut rng = seed::rng(3);
        let n = 100;
        let x = Tensor::randn(n, 2, 1.0, &mut rng);
        let f = FeatureMatrix::with_intercept(&x).unwrap();
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..n).map(|i| x.get(i, 1)).collect();
        let folds = split_folds(n, 5, 0).unwrap();
        let (nu, reps) =
            fit_downstream_nuisances(&f, &t, &y, OutcomeFamily::Continuous, &DownstreamConfig::default(), Some(&folds))
                .unwrap();
        assert_eq!(reps.len(), 15);
        assert!(nu.g.iter().all(|g| *g > 0.0 && *g < 1.0));
    }
}

//! Finite-difference audit of every backward rule and of the full model
//! loss on small random instances.

use std::fmt::Write as _;

use rand::Rng;

use crate::atm::{build_loss, AtmParams, Batch, BatchLabels, BinaryOutcomeLoss, LossSpec, OutcomeFamily, TrainMode};
use crate::error::Result;
use crate::seed::{self, Rng as SeedRng};
use crate::tensor::{grad_check, sigmoid, GradCheckConfig, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Adds a rule whose backward pass has a flipped sign; the report must
    /// flag it.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            tolerance: 1e-4,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleResult {
    pub rule: String,
    pub instances: usize,
    pub failed: usize,
    /// Instances that errored while building the graph.
    pub errors: usize,
    pub max_rel_error: f64,
    pub kinks_skipped: usize,
}

impl RuleResult {
    pub fn passed(&self) -> bool {
        self.failed == 0 && self.errors == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSuiteReport {
    pub rules: Vec<RuleResult>,
    pub tolerance: f64,
}

impl GradcheckSuiteReport {
    pub fn passed(&self) -> bool {
        self.rules.iter().all(RuleResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            let _ = writeln!(
                out,
                "{} {:<28} {:>3}/{:<3} max_rel_error={:.3e} kinks_skipped={}{}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.rule,
                r.instances - r.failed - r.errors,
                r.instances,
                r.max_rel_error,
                r.kinks_skipped,
                if r.errors > 0 { format!(" errors={}", r.errors) } else { String::new() },
            );
        }
        let failed = self.rules.iter().filter(|r| !r.passed()).count();
        let _ = writeln!(
            out,
            "{}: {} rules, {failed} failing, tolerance {:e}",
            if failed == 0 { "ok" } else { "FAILED" },
            self.rules.len(),
            self.tolerance
        );
        out
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance: parameter values and the graph to differentiate.
struct Instance {
    params: Vec<Tensor>,
    build: Builder,
}

fn dim(rng: &mut SeedRng) -> usize {
    rng.random_range(1..=8)
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut SeedRng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("sizes agree")
}

fn bits(rows: usize, cols: usize, rng: &mut SeedRng) -> Tensor {
    let data = (0..rows * cols).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
    Tensor::new(rows, cols, data).expect("sizes agree")
}

/// Reduces an op's output to a scalar through fixed random weights, so every
/// output entry contributes a distinct sensitivity.
fn weighted(op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static, params: Vec<Tensor>, rng: &mut SeedRng) -> Instance {
    let mut probe = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| probe.leaf(p.clone())).collect();
    let shape = op(&mut probe, &vars).map(|v| probe.value(v).shape()).unwrap_or([1, 1]);
    let w = Tensor::randn(shape[0], shape[1], 1.0, rng);
    Instance {
        params,
        build: Box::new(move |g, v| {
            let out = op(g, v)?;
            let c = g.constant(w.clone());
            let m = g.mul(out, c)?;
            Ok(g.sum(m))
        }),
    }
}

fn dtanh(x: f64) -> f64 {
    1.0 - x.tanh().powi(2)
}

fn flipped_dsigmoid(x: f64) -> f64 {
    let s = sigmoid(x);
    -s * (1.0 - s)
}

type RuleGen = fn(&mut SeedRng) -> Instance;

fn elementwise(rng: &mut SeedRng, lo: f64, hi: f64) -> (usize, usize, Tensor) {
    let (n, m) = (dim(rng), dim(rng));
    let x = uniform(n, m, lo, hi, rng);
    (n, m, x)
}

fn rules() -> Vec<(&'static str, RuleGen)> {
    vec![
        ("matmul", |rng| {
            let (n, d, m) = (dim(rng), dim(rng), dim(rng));
            let p = vec![Tensor::randn(n, d, 1.0, rng), Tensor::randn(d, m, 1.0, rng)];
            weighted(|g, v| g.matmul(v[0], v[1]), p, rng)
        }),
        ("add_bias", |rng| {
            let (n, m) = (dim(rng), dim(rng));
            let p = vec![Tensor::randn(n, m, 1.0, rng), Tensor::randn(1, m, 1.0, rng)];
            weighted(|g, v| g.add_bias(v[0], v[1]), p, rng)
        }),
        ("affine", |rng| {
            let (n, d, m) = (dim(rng), dim(rng), dim(rng));
            let p = vec![
                Tensor::randn(n, d, 1.0, rng),
                Tensor::randn(d, m, 1.0, rng),
                Tensor::randn(1, m, 1.0, rng),
            ];
            weighted(|g, v| g.affine(v[0], v[1], v[2]), p, rng)
        }),
        ("add", |rng| {
            let (n, m) = (dim(rng), dim(rng));
            let p = vec![Tensor::randn(n, m, 1.0, rng), Tensor::randn(n, m, 1.0, rng)];
            weighted(|g, v| g.add(v[0], v[1]), p, rng)
        }),
        ("sub", |rng| {
            let (n, m) = (dim(rng), dim(rng));
            let p = vec![Tensor::randn(n, m, 1.0, rng), Tensor::randn(n, m, 1.0, rng)];
            weighted(|g, v| g.sub(v[0], v[1]), p, rng)
        }),
        ("mul", |rng| {
            let (n, m) = (dim(rng), dim(rng));
            let p = vec![Tensor::randn(n, m, 1.0, rng), Tensor::randn(n, m, 1.0, rng)];
            weighted(|g, v| g.mul(v[0], v[1]), p, rng)
        }),
        ("scale", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            let c = rng.random_range(-3.0..3.0);
            weighted(move |g, v| Ok(g.scale(v[0], c)), vec![x], rng)
        }),
        ("offset", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            let c = rng.random_range(-3.0..3.0);
            weighted(move |g, v| Ok(g.offset(v[0], c)), vec![x], rng)
        }),
        ("square", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.square(v[0])), vec![x], rng)
        }),
        ("exp", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.exp(v[0])), vec![x], rng)
        }),
        ("log", |rng| {
            let (_, _, x) = elementwise(rng, 0.2, 3.0);
            weighted(|g, v| g.log(v[0]), vec![x], rng)
        }),
        ("relu", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.relu(v[0])), vec![x], rng)
        }),
        ("softplus", |rng| {
            let (_, _, x) = elementwise(rng, -4.0, 4.0);
            weighted(|g, v| Ok(g.softplus(v[0])), vec![x], rng)
        }),
        ("sigmoid", |rng| {
            let (_, _, x) = elementwise(rng, -4.0, 4.0);
            weighted(|g, v| Ok(g.sigmoid(v[0])), vec![x], rng)
        }),
        ("clamp_min", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            let floor = rng.random_range(-1.0..1.0);
            weighted(move |g, v| Ok(g.clamp_min(v[0], floor)), vec![x], rng)
        }),
        ("softmax_rows", |rng| {
            let (_, _, x) = elementwise(rng, -3.0, 3.0);
            weighted(|g, v| Ok(g.softmax_rows(v[0])), vec![x], rng)
        }),
        ("bce_with_logits", |rng| {
            let (n, m, x) = elementwise(rng, -4.0, 4.0);
            let t = bits(n, m, rng);
            weighted(move |g, v| g.bce_with_logits(v[0], t.clone()), vec![x], rng)
        }),
        ("squared_error", |rng| {
            let (n, m, x) = elementwise(rng, -2.0, 2.0);
            let y = Tensor::randn(n, m, 1.0, rng);
            weighted(move |g, v| g.squared_error(v[0], y.clone()), vec![x], rng)
        }),
        ("count_loglik", |rng| {
            let (n, m, x) = elementwise(rng, 0.1, 1.0);
            let c = Tensor::new(n, m, (0..n * m).map(|_| f64::from(rng.random_range(0u8..4))).collect())
                .expect("sizes agree");
            weighted(move |g, v| g.count_loglik(v[0], c.clone()), vec![x], rng)
        }),
        ("sum", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.sum(v[0])), vec![x], rng)
        }),
        ("mean", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.mean(v[0])), vec![x], rng)
        }),
        ("sum_cols", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.sum_cols(v[0])), vec![x], rng)
        }),
        ("map(tanh)", |rng| {
            let (_, _, x) = elementwise(rng, -2.0, 2.0);
            weighted(|g, v| Ok(g.map(v[0], f64::tanh, dtanh)), vec![x], rng)
        }),
        ("reparam", |rng| {
            let (n, m) = (dim(rng), dim(rng));
            let mu = Tensor::randn(n, m, 1.0, rng);
            let sigma = uniform(n, m, 0.1, 2.0, rng);
            let eps = Tensor::randn(n, m, 1.0, rng);
            weighted(move |g, v| g.reparam_with_noise(v[0], v[1], eps.clone()), vec![mu, sigma], rng)
        }),
    ]
}

/// Full model loss on a random 5-document instance.
fn loss_instance(spec: LossSpec, rng: &mut SeedRng) -> Instance {
    const DOCS: usize = 5;
    let (v, h, k) = (rng.random_range(3..=8), rng.random_range(2..=6), rng.random_range(2..=4));
    let mut params = AtmParams::init(v, h, k, rng);
    // nonzero heads so the supervised terms reach the encoder
    for head in [&mut params.gamma_g, &mut params.gamma_q0, &mut params.gamma_q1] {
        head.w = Tensor::randn(k, 1, 0.5, rng);
        head.b = Tensor::randn(1, 1, 0.5, rng);
    }
    let counts = Tensor::new(
        DOCS,
        v,
        (0..DOCS * v).map(|_| f64::from(rng.random_range(0u8..4))).collect(),
    )
    .expect("sizes agree");
    let mut normalized = counts.clone();
    for r in 0..DOCS {
        let total: f64 = counts.row(r).iter().sum::<f64>().max(1.0);
        normalized.row_mut(r).iter_mut().for_each(|c| *c /= total);
    }
    let treatment: Vec<f64> = (0..DOCS).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
    let outcome: Vec<f64> = match spec.family {
        OutcomeFamily::Continuous => (0..DOCS).map(|_| rng.random_range(-2.0..2.0)).collect(),
        OutcomeFamily::Binary => (0..DOCS).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect(),
    };
    let batch = Batch {
        normalized,
        counts,
        labels: BatchLabels {
            treatment,
            outcome: Some(outcome),
        },
        noise: Tensor::randn(DOCS, k, 1.0, rng),
    };
    Instance {
        params: params.tensors().into_iter().cloned().collect(),
        build: Box::new(move |g, vars| Ok(build_loss(g, vars, &batch, &spec)?.total)),
    }
}

fn loss_variants() -> Vec<(&'static str, LossSpec)> {
    let spec = |mode, family, binary_loss| LossSpec {
        mode,
        family,
        binary_loss,
        supervision_weight: 1.0,
    };
    use BinaryOutcomeLoss::*;
    use OutcomeFamily::*;
    use TrainMode::*;
    vec![
        ("loss causal continuous", spec(Causal, Continuous, CrossEntropy)),
        ("loss causal binary ce", spec(Causal, Binary, CrossEntropy)),
        ("loss causal binary se", spec(Causal, Binary, SquaredError)),
        ("loss unsupervised", spec(Unsupervised, Continuous, CrossEntropy)),
        ("loss supervised-only", spec(SupervisedOnly, Continuous, CrossEntropy)),
    ]
}

fn check_rule(name: &str, instances: usize, rule_seed: u64, tolerance: f64, make: &dyn Fn(&mut SeedRng) -> Instance) -> RuleResult {
    let cfg = GradCheckConfig {
        tolerance,
        ..GradCheckConfig::default()
    };
    let mut result = RuleResult {
        rule: name.to_string(),
        instances,
        failed: 0,
        errors: 0,
        max_rel_error: 0.0,
        kinks_skipped: 0,
    };
    for i in 0..instances {
        let mut rng = seed::rng(seed::derive(rule_seed, i as u64));
        let inst = make(&mut rng);
        match grad_check(&inst.build, &inst.params, cfg) {
            Ok(rep) => {
                result.max_rel_error = result.max_rel_error.max(rep.max_rel_error());
                result.kinks_skipped += rep.kinks();
                if !rep.passed() {
                    result.failed += 1;
                }
            }
            Err(e) => {
                log::warn!("{name} instance {i}: {e}");
                result.errors += 1;
            }
        }
    }
    result
}

/// Runs every rule and every loss variant on `instances` random instances
/// each. Rule `r`, instance `i` draws from `derive(derive(seed, r), i)`.
pub fn run_gradcheck(config: &GradcheckConfig) -> GradcheckSuiteReport {
    use rayon::prelude::*;
    let mut jobs: Vec<(String, Box<dyn Fn(&mut SeedRng) -> Instance + Send + Sync>)> = Vec::new();
    for (name, make) in rules() {
        jobs.push((name.to_string(), Box::new(make)));
    }
    for (name, spec) in loss_variants() {
        jobs.push((name.to_string(), Box::new(move |rng: &mut SeedRng| loss_instance(spec, rng))));
    }
    if config.inject_fault {
        jobs.push((
            "fault: sigmoid sign flip".to_string(),
            Box::new(|rng: &mut SeedRng| {
                let (_, _, x) = elementwise(rng, -3.0, 3.0);
                weighted(|g, v| Ok(g.map(v[0], sigmoid, flipped_dsigmoid)), vec![x], rng)
            }),
        ));
    }
    let rules = jobs
        .par_iter()
        .enumerate()
        .map(|(r, (name, make))| {
            check_rule(name, config.instances, seed::derive(config.seed, r as u64), config.tolerance, make.as_ref())
        })
        .collect();
    GradcheckSuiteReport {
        rules,
        tolerance: config.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes_and_is_deterministic() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..GradcheckConfig::default()
        };
        let a = run_gradcheck(&cfg);
        assert!(a.passed(), "{}", a.render());
        assert_eq!(a, run_gradcheck(&cfg));
    }

    #[test]
    fn injected_fault_is_reported() {
        let cfg = GradcheckConfig {
            instances: 3,
            inject_fault: true,
            ..GradcheckConfig::default()
        };
        let rep = run_gradcheck(&cfg);
        assert!(!rep.passed());
        let bad: Vec<&RuleResult> = rep.rules.iter().filter(|r| !r.passed()).collect();
        assert_eq!(bad.len(), 1);
        assert!(bad[0].rule.starts_with("fault"));
        assert!(rep.render().contains("FAIL fault"));
    }
}

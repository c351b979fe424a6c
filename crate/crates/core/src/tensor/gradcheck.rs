use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    /// Entries whose perturbation crossed a relu/clamp kink; not scored.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences, entry by entry.
///
/// `f` must be deterministic: any randomness has to come from an rng seeded
/// inside the closure.
pub fn grad_check<F>(f: F, params: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (graph, vars, out) = evaluate(&f, params)?;
    let grads = graph.backward(out)?;
    let base_kinks = graph.kink_signature().to_vec();

    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tolerance: config.tolerance,
    };
    let mut perturbed = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).data().to_vec();
        let mut check = ParamCheck {
            param: pi,
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
            worst_entry: 0,
        };
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            perturbed[pi].data_mut()[k] = orig + config.epsilon;
            let (gp, _, op) = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[k] = orig - config.epsilon;
            let (gm, _, om) = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[k] = orig;

            if gp.kink_signature() != base_kinks.as_slice()
                || gm.kink_signature() != base_kinks.as_slice()
            {
                check.kinks += 1;
                continue;
            }
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * config.epsilon);
            let a = analytic[k];
            let denom = a.abs().max(numeric.abs()).max(config.scale_floor);
            let rel = (a - numeric).abs() / denom;
            check.checked += 1;
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_entry = k;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::row_vector(vec![0.3, -1.2, 2.5, 0.0]);
        let report = grad_check(
            |g, p| {
                let sq = g.square(p[0]);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &[theta],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
        assert!(report.passed());
    }

    #[test]
    fn relu_kink_is_flagged_not_failed() {
        let x = Tensor::row_vector(vec![0.0, 1.0, -1.0]);
        let report = grad_check(
            |g, p| {
                let r = g.relu(p[0]);
                Ok(g.sum(r))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.kinks(), 1);
        assert_eq!(report.params[0].checked, 2);
        assert!(report.passed());
    }

    #[test]
    fn wrong_backward_rule_fails() {
        fn tanh(x: f64) -> f64 {
            x.tanh()
        }
        fn wrong_dtanh(x: f64) -> f64 {
            -(1.0 - x.tanh().powi(2))
        }
        let x = Tensor::row_vector(vec![0.4, -0.7]);
        let report = grad_check(
            |g, p| {
                let y = g.map(p[0], tanh, wrong_dtanh);
                Ok(g.sum(y))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }
}

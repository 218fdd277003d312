use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::optim::ParamSet;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Sampling policy for large parameter sets.
#[derive(Debug, Clone, Copy)]
pub struct Subsample {
    pub max_entries: usize,
    pub seed: u64,
}

/// Builds the loss graph for `params` and returns its scalar value.
pub fn eval_loss<F>(loss_fn: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|(k, t)| (k.clone(), g.param(t.clone())))
        .collect();
    let out = loss_fn(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares reverse-mode gradients against central finite differences.
///
/// The relative error of each entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    loss_fn: F,
    params: &ParamSet,
    eps: f64,
    subsample: Option<Subsample>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }

    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, t)| (k.clone(), g.param(t.clone())))
        .collect();
    let out = loss_fn(&mut g, &vars)?;
    let base = g.value(out).item()?;
    let grads = g.backward(out)?;

    let again = eval_loss(&loss_fn, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::contract(
            "loss function is not deterministic across evaluations",
        ));
    }

    let entries: Vec<(&String, usize)> = params
        .iter()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    let chosen: Vec<usize> = match subsample {
        Some(s) if entries.len() > s.max_entries => {
            let mut r = rng::seeded(s.seed);
            let mut idx = sample(&mut r, entries.len(), s.max_entries).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..entries.len()).collect(),
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        entries_checked: chosen.len(),
        worst: None,
    };
    let mut perturbed = params.clone();
    for &e in &chosen {
        let (name, i) = entries[e];
        let original = params[name].data()[i];
        perturbed.get_mut(name).unwrap().data_mut()[i] = original + eps;
        let plus = eval_loss(&loss_fn, &perturbed)?;
        perturbed.get_mut(name).unwrap().data_mut()[i] = original - eps;
        let minus = eval_loss(&loss_fn, &perturbed)?;
        perturbed.get_mut(name).unwrap().data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(vars[name]).data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((name.clone(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params() -> ParamSet {
        ParamSet::from([(
            "x".to_string(),
            Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap(),
        )])
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let report = grad_check(
            |g, v| {
                let sq = g.square(v["x"])?;
                g.sum(sq)
            },
            &params(),
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &params(),
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let err = grad_check(|g, v| g.sum(v["x"]), &params(), 1e-2, None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_nondeterministic_loss() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let err = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let c = g.constant(Tensor::scalar(calls.get()));
                let s = g.sum(v["x"])?;
                g.add(s, c)
            },
            &params(),
            1e-5,
            None,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}

//! Classification and regression metrics with per-domain breakdowns.

use serde::{Deserialize, Serialize};

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over every class that appears in the
/// truth or the predictions.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == c, t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    total / classes.len() as f64
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / truth.len() as f64
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Metrics over one group of predictions. Classification fields are `None`
/// for regression and vice versa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub domain_id: Option<u32>,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mse: Option<f64>,
    pub pearson: Option<f64>,
}

impl GroupMetrics {
    pub fn classification(domain_id: Option<u32>, pred: &[usize], truth: &[usize]) -> Self {
        Self {
            domain_id,
            n: truth.len(),
            accuracy: Some(accuracy(pred, truth)),
            macro_f1: Some(macro_f1(pred, truth)),
            mse: None,
            pearson: None,
        }
    }

    pub fn regression(domain_id: Option<u32>, pred: &[f64], truth: &[f64]) -> Self {
        Self {
            domain_id,
            n: truth.len(),
            accuracy: None,
            macro_f1: None,
            mse: Some(mse(pred, truth)),
            pearson: Some(pearson(pred, truth)),
        }
    }
}

/// Pooled (micro) metrics, per-domain metrics, and worst-case values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: GroupMetrics,
    pub per_domain: Vec<GroupMetrics>,
    pub worst_accuracy: Option<f64>,
    pub worst_macro_f1: Option<f64>,
    pub worst_pearson: Option<f64>,
    pub max_mse: Option<f64>,
}

impl Metrics {
    pub fn from_groups(overall: GroupMetrics, per_domain: Vec<GroupMetrics>) -> Self {
        let worst = |f: fn(&GroupMetrics) -> Option<f64>| {
            per_domain.iter().filter_map(f).reduce(f64::min)
        };
        let max_mse = per_domain.iter().filter_map(|m| m.mse).reduce(f64::max);
        Self {
            worst_accuracy: worst(|m| m.accuracy),
            worst_macro_f1: worst(|m| m.macro_f1),
            worst_pearson: worst(|m| m.pearson),
            max_mse,
            overall,
            per_domain,
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy.unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let t = vec![0, 1, 2, 1, 0];
        assert_eq!(accuracy(&t, &t), 1.0);
        assert_eq!(macro_f1(&t, &t), 1.0);
    }

    #[test]
    fn constant_predictor_matches_brute_force() {
        for k in 2..7usize {
            let truth: Vec<usize> = (0..k * 10).map(|i| i % k).collect();
            let pred = vec![0; truth.len()];
            assert!((accuracy(&pred, &truth) - 1.0 / k as f64).abs() < 1e-15);

            // brute force: per-class precision/recall from counts
            let mut f1s = Vec::new();
            for c in 0..k {
                let tp = (0..truth.len()).filter(|&i| pred[i] == c && truth[i] == c).count() as f64;
                let pp = pred.iter().filter(|&&p| p == c).count() as f64;
                let ap = truth.iter().filter(|&&t| t == c).count() as f64;
                let (prec, rec) = (if pp > 0.0 { tp / pp } else { 0.0 }, tp / ap);
                f1s.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
            }
            let brute = f1s.iter().sum::<f64>() / k as f64;
            let closed = (1.0 / k as f64) * (2.0 / (k as f64 + 1.0));
            assert!((macro_f1(&pred, &truth) - brute).abs() < 1e-12);
            assert!((brute - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_of_identity_is_one() {
        let v = [0.3, 1.7, -2.0, 5.5];
        assert!((pearson(&v, &v) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_handles_ties_and_monotone_maps() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 20.0, 40.0];
        assert!(spearman(&a, &b) > 0.9);
        let c = [1.0, 8.0, 27.0, 64.0];
        assert!((spearman(&a, &c) - 1.0).abs() < 1e-15);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &rev) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn worst_case_is_minimum_over_domains() {
        let g = |id, acc| GroupMetrics {
            domain_id: Some(id),
            n: 10,
            accuracy: Some(acc),
            macro_f1: Some(acc / 2.0),
            mse: None,
            pearson: None,
        };
        let m = Metrics::from_groups(g(99, 0.7), vec![g(0, 0.9), g(1, 0.4), g(2, 0.8)]);
        assert_eq!(m.worst_accuracy, Some(0.4));
        assert_eq!(m.worst_macro_f1, Some(0.2));
    }
}

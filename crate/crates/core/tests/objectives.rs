mod common;

use std::collections::BTreeMap;

use common::{close, gaussian, matrix, orthogonal_rows, pair_distance_derivative};
use rand::Rng;
use vdpg_core::data::Task;
use vdpg_core::objectives::*;
use vdpg_core::rng;
use vdpg_core::tensor::{grad_check, Graph, ParamSet, Tensor, Var};
use vdpg_core::Error;

fn corr(b: &Tensor) -> f64 {
    corr_loss_value(b, CorrNorm::Frobenius).unwrap()
}

#[test]
fn corr_is_zero_exactly_for_orthogonal_rows() {
    let mut r = rng::seeded(1);
    for _ in 0..50 {
        let z = r.random_range(1..7);
        let b = orthogonal_rows(z, 8, &mut r);
        assert!(corr(&b) < 1e-10);
        // generic banks with two or more rows are not orthogonal
        if z >= 2 {
            assert!(corr(&gaussian(z, 8, &mut r)) > 1e-3);
        }
    }
}

#[test]
fn corr_examples() {
    assert_eq!(corr(&matrix(&[&[1.0, 0.0], &[0.0, 1.0]])), 0.0);
    assert!(close(corr(&matrix(&[&[1.0, 0.0], &[1.0, 0.0]])), 2f64.sqrt(), 1e-15));
    let mut r = rng::seeded(2);
    let b = gaussian(4, 6, &mut r);
    for c in [0.5, 2.0, -3.0] {
        let scaled = b.map(|v| v * c);
        // brute force: off-diagonal Gram entries
        let gram = scaled.matmul(&scaled.transpose()).unwrap();
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    s += gram.get(i, j).powi(2);
                }
            }
        }
        assert!(close(corr(&scaled), s.sqrt(), 1e-12));
        assert!(close(corr(&scaled), c * c * corr(&b), 1e-9));
    }
}

fn dac(prompts: &[Tensor], ids: &[u32]) -> f64 {
    dac_loss_value(prompts, ids, 0.1, PromptDistance::MeanSquared).unwrap()
}

#[test]
fn dac_identical_prompts_is_ln3() {
    let p = vec![Tensor::filled(3, 4, 0.7); 4];
    assert!(close(dac(&p, &[0, 0, 1, 1]), 3f64.ln(), 1e-12));
}

#[test]
fn dac_separated_domains_vanish() {
    let a = Tensor::zeros(2, 3);
    let b = Tensor::filled(2, 3, 50f64.sqrt());
    assert!((PromptDistance::MeanSquared.between(&a, &b) - 50.0).abs() < 1e-12);
    let v = dac(&[a.clone(), a, b.clone(), b], &[0, 0, 1, 1]);
    assert!(v < 1e-12, "{v}");
}

#[test]
fn dac_single_domain_is_zero() {
    let mut r = rng::seeded(3);
    let p: Vec<Tensor> = (0..3).map(|_| gaussian(2, 2, &mut r)).collect();
    assert_eq!(dac(&p, &[4, 4, 4]), 0.0);
}

#[test]
fn dac_mismatched_lengths_is_contract_error() {
    let p = vec![Tensor::zeros(1, 1); 3];
    let err = dac_loss_value(&p, &[0, 1], 0.1, PromptDistance::MeanSquared);
    assert!(matches!(err, Err(Error::Contract(_))));
}

fn random_instance(r: &mut impl Rng) -> (Vec<Tensor>, Vec<u32>) {
    let n_a = r.random_range(2..4);
    let n_b = r.random_range(2..4);
    let ids: Vec<u32> = std::iter::repeat_n(0, n_a).chain(std::iter::repeat_n(1, n_b)).collect();
    let prompts = ids.iter().map(|_| gaussian(2, 3, r).map(|v| v * 0.4)).collect();
    (prompts, ids)
}

#[test]
fn dac_relabel_and_reorder_invariance() {
    let mut r = rng::seeded(4);
    for _ in 0..100 {
        let (p, ids) = random_instance(&mut r);
        let base = dac(&p, &ids);
        let swapped: Vec<u32> = ids.iter().map(|i| if *i == 0 { 7 } else { 3 }).collect();
        assert!(close(dac(&p, &swapped), base, 1e-12));
        let rev_p: Vec<Tensor> = p.iter().rev().cloned().collect();
        let rev_ids: Vec<u32> = ids.iter().rev().copied().collect();
        assert!(close(dac(&rev_p, &rev_ids), base, 1e-12));
    }
}

/// Moving one pair apart with every other distance fixed: only the pair
/// distance changes, so the test differentiates along that entry.
#[test]
fn dac_monotone_in_pair_distances() {
    let mut r = rng::seeded(5);
    for _ in 0..100 {
        let (p, ids) = random_instance(&mut r);
        let last = ids.len() - 1;
        assert!(pair_distance_derivative(&p, &ids, 0, last) < 0.0, "cross pair");
        assert!(pair_distance_derivative(&p, &ids, 0, 1) > 0.0, "same pair");
    }
}

#[test]
fn task_loss_examples() {
    let ce = |logits: Tensor, t: Vec<usize>| {
        let mut g = Graph::new();
        let o = g.constant(logits);
        let l = task_loss(&mut g, o, &Targets::Classes(t), Task::Classification).unwrap();
        g.value(l).item().unwrap()
    };
    assert!(close(ce(Tensor::zeros(2, 5), vec![0, 3]), 5f64.ln(), 1e-15));
    assert!(close(ce(matrix(&[&[3f64.ln(), 0.0]]), vec![0]), (4.0f64 / 3.0).ln(), 1e-15));

    let mut g = Graph::new();
    let o = g.constant(matrix(&[&[1.5], &[-2.0]]));
    let l = task_loss(&mut g, o, &Targets::Values(vec![1.5, -2.0]), Task::Regression).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let mut g = Graph::new();
    let o = g.constant(Tensor::zeros(1, 3));
    let err = task_loss(&mut g, o, &Targets::Classes(vec![3]), Task::Classification);
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn total_loss_examples() {
    let run = |w: &LossWeights| {
        let mut g = Graph::new();
        let t = g.constant(Tensor::scalar(1.0));
        let c = g.constant(Tensor::scalar(2.0));
        let d = g.constant(Tensor::scalar(3.0));
        let l = total_loss(&mut g, t, c, d, w).unwrap();
        g.value(l).item().unwrap()
    };
    let w = LossWeights::default();
    assert_eq!((w.lambda_corr, w.gamma_dac, w.tau), (0.1, 0.1, 0.1));
    assert!(close(run(&w), 1.5, 1e-15));
    let off = LossWeights {
        lambda_corr: 0.0,
        gamma_dac: 0.0,
        ..w
    };
    assert_eq!(run(&off), 1.0);
}

fn loss_params(seed: u64) -> ParamSet {
    let mut r = rng::seeded(seed);
    ParamSet::from([
        ("bank".to_string(), gaussian(3, 4, &mut r)),
        ("p".to_string(), gaussian(5, 12, &mut r).map(|v| v * 0.3)),
        ("logits".to_string(), gaussian(4, 3, &mut r)),
    ])
}

fn components(g: &mut Graph, v: &BTreeMap<String, Var>) -> vdpg_core::Result<(Var, Var, Var)> {
    let corr = corr_loss(g, v["bank"], CorrNorm::Frobenius)?;
    let prompts = (0..5)
        .map(|i| {
            let row = g.slice_rows(v["p"], i, 1)?;
            g.reshape(row, 3, 4)
        })
        .collect::<vdpg_core::Result<Vec<_>>>()?;
    let dac = dac_loss(g, &prompts, &[0, 0, 1, 1, 2], 0.1, PromptDistance::MeanSquared)?;
    let task = task_loss(g, v["logits"], &Targets::Classes(vec![0, 2, 1, 2]), Task::Classification)?;
    Ok((task, corr, dac))
}

#[test]
fn each_loss_passes_grad_check() {
    for seed in 0..5 {
        let p = loss_params(seed);
        for pick in 0..3 {
            let report = grad_check(
                |g, v| {
                    let (t, c, d) = components(g, v)?;
                    Ok([t, c, d][pick])
                },
                &p,
                1e-5,
                None,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "seed {seed} loss {pick}: {report:?}");
        }
    }
}

#[test]
fn total_gradient_is_weighted_sum() {
    let p = loss_params(9);
    let w = LossWeights {
        lambda_corr: 0.3,
        gamma_dac: 0.7,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = p.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
    let (t, c, d) = components(&mut g, &vars).unwrap();
    let total = total_loss(&mut g, t, c, d, &w).unwrap();
    let gt = g.backward(total).unwrap();
    let parts = [(t, 1.0), (c, w.lambda_corr), (d, w.gamma_dac)].map(|(v, s)| (g.backward(v).unwrap(), s));
    for (name, var) in &vars {
        let expect: Vec<f64> = (0..p[name].len())
            .map(|i| parts.iter().map(|(gr, s)| s * gr.get(*var).data()[i]).sum())
            .collect();
        for (a, b) in gt.get(*var).data().iter().zip(expect) {
            assert!(close(*a, b, 1e-12), "{name}");
        }
    }
}

#[test]
fn full_objective_passes_grad_check() {
    let report = common::full_objective_grad_check(0);
    assert!(report.entries_checked > 500);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#![allow(dead_code)]

use vdpg_core::data::{synth_generate, Dataset, SyntheticBenchmark, SyntheticConfig, Task};
use vdpg_core::model::ModelConfig;
use rand::Rng;
use rand_distr::StandardNormal;
use vdpg_core::objectives::PromptDistance;
use vdpg_core::tensor::Tensor;

/// d=8, Z=3, two heads, three classes.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        bank_size: 3,
        num_heads: 2,
        num_classes: 3,
        task: Task::Classification,
        ..ModelConfig::default()
    }
}

pub fn toy_synth(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        d: 8,
        l: 4,
        num_classes: 3,
        num_source_domains: 3,
        num_target_domains: 2,
        samples_per_domain: 40,
        seed,
        ..SyntheticConfig::default()
    }
}

pub fn toy_bench(seed: u64) -> SyntheticBenchmark {
    synth_generate(&toy_synth(seed)).expect("toy benchmark")
}

pub fn tokens(ds: &Dataset) -> Vec<&Tensor> {
    ds.records.iter().map(|r| &r.tokens).collect()
}

pub fn matrix(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Gradient check of the complete weighted objective on the toy config.
pub fn full_objective_grad_check(seed: u64) -> vdpg_core::tensor::GradCheckReport {
    let bench = toy_bench(seed);
    let params = vdpg_core::model::ModelParameters::init(&toy_model(), seed).unwrap();
    let w = vdpg_core::objectives::LossWeights::default();
    vdpg_core::trainer::objective_grad_check(&params, &bench.sources[0], &bench.sources[1], &w, 1e-5).unwrap()
}

pub fn gaussian(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

/// Gram–Schmidt on the rows, then random row lengths.
pub fn orthogonal_rows(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    let g = gaussian(rows, cols, r);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for i in 0..rows {
        let mut v = g.row(i).to_vec();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        out.push(v);
    }
    let scaled: Vec<Vec<f64>> = out
        .into_iter()
        .map(|v| {
            let s: f64 = r.random_range(0.2..3.0);
            v.into_iter().map(|a| a * s).collect()
        })
        .collect();
    Tensor::from_rows(&scaled).unwrap()
}

/// The loss as a function of the full distance matrix, differentiated with
/// respect to one symmetric entry by central differences.
pub fn pair_distance_derivative(p: &[Tensor], ids: &[u32], i: usize, j: usize) -> f64 {
    let n = p.len();
    let mut dist = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            dist[a][b] = PromptDistance::MeanSquared.between(&p[a], &p[b]);
        }
    }
    let loss = |dist: &Vec<Vec<f64>>| -> f64 {
        let tau = 0.1;
        let mut total = 0.0;
        let mut count = 0.0;
        for a in 0..n {
            let mut pos = 0.0;
            let mut all = 0.0;
            for b in 0..n {
                if a == b {
                    continue;
                }
                let e = (-dist[a][b] / tau).exp();
                all += e;
                if ids[a] == ids[b] {
                    pos += e;
                }
            }
            if pos > 0.0 {
                total -= (pos / all).ln();
                count += 1.0;
            }
        }
        total / count
    };
    // the scripted oracle above must agree with the library
    let lib = vdpg_core::objectives::dac_loss_value(p, ids, 0.1, PromptDistance::MeanSquared).unwrap();
    assert!(close(loss(&dist), lib, 1e-9));
    let h = 1e-6;
    let mut up = dist.clone();
    up[i][j] += h;
    up[j][i] += h;
    let mut down = dist;
    down[i][j] -= h;
    down[j][i] -= h;
    (loss(&up) - loss(&down)) / (2.0 * h)
}


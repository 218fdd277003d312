mod common;

use common::{tokens, toy_bench, toy_model};
use vdpg_core::data::{synth_generate, SyntheticConfig};
use vdpg_core::model::{generate_prompt_single, DomainPrompt, ModelConfig, ModelParameters, BANK};
use vdpg_core::runtime::*;
use vdpg_core::tensor::Tensor;
use vdpg_core::trainer::{eval_given, eval_model, EvalProtocol, PromptSource};
use vdpg_core::Error;

fn toy_params() -> ModelParameters {
    ModelParameters::init(&toy_model(), 0).unwrap()
}

#[test]
fn adapt_is_forward_only() {
    let bench = toy_bench(0);
    let p = toy_params();
    let before = p.checksum();
    let recs = tokens(&bench.targets[0]);
    let prompt = adapt(&p, &recs, 16).unwrap();
    infer(&p, &prompt, &recs).unwrap();
    assert_eq!(p.checksum(), before);
    match prompt.provenance {
        vdpg_core::model::Provenance::Generated { n_condition_images, .. } => {
            assert_eq!(n_condition_images, 16)
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn adapt_edge_cases() {
    let bench = toy_bench(0);
    let p = toy_params();
    let recs = tokens(&bench.targets[0]);
    assert_eq!(
        adapt(&p, &recs, 1).unwrap().matrix,
        generate_prompt_single(&p, recs[0]).unwrap().matrix
    );
    // k beyond the available records uses all of them
    assert_eq!(adapt(&p, &recs[..5], 16).unwrap(), adapt(&p, &recs[..5], 5).unwrap());
    assert!(matches!(adapt(&p, &[], 16), Err(Error::Contract(_))));
    assert!(matches!(adapt(&p, &recs, 0), Err(Error::Contract(_))));
}

#[test]
fn infer_is_stateless() {
    let bench = toy_bench(0);
    let p = toy_params();
    let recs = tokens(&bench.targets[1]);
    let prompt = adapt(&p, &recs, 16).unwrap();
    let whole = infer(&p, &prompt, &recs).unwrap();
    let mut parts = infer(&p, &prompt, &recs[..7]).unwrap();
    parts.extend(infer(&p, &prompt, &recs[7..]).unwrap());
    assert_eq!(whole, parts);
    let twice = infer(&p, &prompt, &[recs[3], recs[3]]).unwrap();
    assert_eq!(twice[0], twice[1]);
    assert!(infer(&p, &prompt, &[&Tensor::zeros(4, 3)]).is_err());
}

#[test]
fn cache_generates_once() {
    let bench = toy_bench(0);
    let p = toy_params();
    let recs = tokens(&bench.targets[0]);
    let key = PromptCache::domain_key(bench.targets[0].records[0].domain_id);
    let mut cache = PromptCache::new();
    let first = cache.get_or_adapt(&key, &p, &recs, 16).unwrap().clone();
    // a hit ignores the records it is handed
    let again = cache.get_or_adapt(&key, &p, &recs[20..], 16).unwrap().clone();
    assert_eq!(first, again);
    assert_eq!(cache.len(), 1);
    assert_eq!(cache.get(&key).unwrap().n_records, 16);
    assert_eq!(infer(&p, &first, &recs).unwrap(), infer(&p, &again, &recs).unwrap());

    let other = ModelParameters::init(&toy_model(), 1).unwrap();
    assert!(matches!(cache.get_or_adapt(&key, &other, &recs, 16), Err(Error::Contract(_))));
}

#[test]
fn zeros_source_equals_given_zero_prompt() {
    let bench = toy_bench(0);
    let p = toy_params();
    let proto = EvalProtocol::default();
    let a = eval_model(&p, &bench.targets, &PromptSource::Zeros, &proto).unwrap();
    let b = eval_given(&p, &bench.targets, &DomainPrompt::zeros(3, 8), &proto).unwrap();
    assert_eq!(a.metrics, b.metrics);
    for (x, y) in a.domains.iter().zip(&b.domains) {
        assert_eq!(x.outputs, y.outputs);
    }
}

#[test]
fn replacement_table_is_ranked() {
    let bench = toy_bench(0);
    let p = toy_params();
    let rows = swap_prompt_eval(
        &p,
        &bench.targets,
        &[PromptSource::Generated, PromptSource::Zeros, PromptSource::Random { seed: 1 }, PromptSource::Bank],
        &EvalProtocol::default(),
    )
    .unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[0].metrics.accuracy() >= w[1].metrics.accuracy()));
}

/// One untrained init has a paired noise of a few points on ~850 records, so
/// the null control averages six inits and bounds each source's mean against
/// the pooled mean.
#[test]
fn untrained_replacements_are_indistinguishable() {
    let bench = synth_generate(&SyntheticConfig::default()).unwrap();
    let sources = [PromptSource::Generated, PromptSource::Zeros, PromptSource::Random { seed: 1 }, PromptSource::Bank];
    let mut sums = [0.0; 4];
    let inits = 6;
    for seed in 0..inits {
        let p = ModelParameters::init(&ModelConfig::default(), seed).unwrap();
        for (s, src) in sums.iter_mut().zip(&sources) {
            *s += eval_model(&p, &bench.targets, src, &EvalProtocol::default()).unwrap().metrics.accuracy() / inits as f64;
        }
    }
    let pooled = sums.iter().sum::<f64>() / 4.0;
    for (m, src) in sums.iter().zip(&sources) {
        assert!((m - pooled).abs() <= 0.02, "{src:?}: {m} vs pooled {pooled}");
    }
}

#[test]
fn swapping_a_domain_with_itself_costs_nothing() {
    let bench = toy_bench(0);
    let p = toy_params();
    let id = bench.targets[0].records[0].domain_id;
    let s = cross_domain_prompt_swap(&p, &bench.targets, id, id, &EvalProtocol::default()).unwrap();
    assert_eq!((s.drop_a, s.drop_b, s.prompt_distance), (0.0, 0.0, 0.0));
    assert!(cross_domain_prompt_swap(&p, &bench.targets, id, 999, &EvalProtocol::default()).is_err());
}

#[test]
fn swap_study_covers_every_pair() {
    let cfg = SyntheticConfig {
        num_target_domains: 4,
        ..common::toy_synth(0)
    };
    let bench = synth_generate(&cfg).unwrap();
    let study = swap_study(&toy_params(), &bench.targets, &EvalProtocol::default()).unwrap();
    assert_eq!(study.pairs.len(), 6);
    assert!((-1.0..=1.0).contains(&study.spearman));
}

fn assert_distance_matrix(m: &[Vec<f64>]) {
    for (i, row) in m.iter().enumerate() {
        assert_eq!(row[i], 0.0);
        for (j, v) in row.iter().enumerate() {
            assert!(*v >= 0.0);
            assert_eq!(*v, m[j][i]);
        }
    }
}

#[test]
fn distance_matrices_are_symmetric_with_zero_diagonal() {
    let bench = toy_bench(0);
    let p = toy_params();
    let dom = prompt_distance_matrix(&p, &bench.targets, DistanceLevel::Domain, 20, 0).unwrap();
    assert_eq!(dom.matrix.len(), 2);
    assert_distance_matrix(&dom.matrix);
    let inst = prompt_distance_matrix(&p, &bench.targets, DistanceLevel::Instance, 10, 0).unwrap();
    assert_eq!(inst.matrix.len(), 20);
    assert_distance_matrix(&inst.matrix);
    assert_eq!(inst.blocks.len(), 2);
    assert!(inst.same_class_cross_domain.is_some());
}

#[test]
fn instance_prompts_match_single_generation() {
    let bench = toy_bench(0);
    let p = toy_params();
    let recs = tokens(&bench.targets[0]);
    let batch = instance_prompts(&p, &recs[..4]).unwrap();
    for (t, r) in batch.iter().zip(&recs[..4]) {
        assert_eq!(*t, generate_prompt_single(&p, r).unwrap().matrix);
    }
}

#[test]
fn bank_correlation_examples() {
    let mut p = toy_params();
    let c = bank_correlation(&p);
    for i in 0..3 {
        assert_eq!(c.get(i, i), 1.0);
        for j in 0..3 {
            assert_eq!(c.get(i, j), c.get(j, i));
        }
    }
    assert!(max_offdiag_abs(&c) > 0.0);

    let mut ortho = Tensor::zeros(3, 8);
    for i in 0..3 {
        ortho.data_mut()[i * 8 + 2 * i] = 1.5 + i as f64;
    }
    p.tensors.insert(BANK.into(), ortho);
    assert_eq!(bank_correlation(&p), Tensor::identity(3));
}

#[test]
fn inference_throughput_is_logged() {
    let bench = synth_generate(&SyntheticConfig { samples_per_domain: 512, num_target_domains: 1, ..SyntheticConfig::default() }).unwrap();
    let p = ModelParameters::init(&ModelConfig::default(), 0).unwrap();
    let recs = tokens(&bench.targets[0]);
    let prompt = adapt(&p, &recs, 16).unwrap();
    let t = std::time::Instant::now();
    let out = infer(&p, &prompt, &recs[..512]).unwrap();
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(out.len(), 512);
    println!("inference on 512 records: {secs:.3}s ({:.0} records/s)", 512.0 / secs);
}

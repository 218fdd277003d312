mod common;

use std::collections::BTreeSet;

use common::{toy_bench, toy_model};
use vdpg_core::data::{Dataset, DomainPool, Label, Task};
use vdpg_core::model::{load_checkpoint, Forward, ModelParameters};
use vdpg_core::objectives::{corr_loss_value, dac_loss_value, task_loss, CorrNorm, LossWeights, PromptDistance, Targets};
use vdpg_core::rng;
use vdpg_core::runtime::instance_prompts;
use vdpg_core::tensor::{Graph, OptimizerState, ParamSet};
use vdpg_core::trainer::*;
use vdpg_core::Error;

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        episodes_per_epoch: Some(10),
        pretrain_epochs: 3,
        ..TrainConfig::synthetic()
    }
}

#[test]
fn zero_epochs_returns_init() {
    let bench = toy_bench(0);
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let run = train(&bench.sources, &toy_train(0), init.clone(), None).unwrap();
    assert_eq!(run.params, init);
    assert!(run.log.entries.is_empty());
}

#[test]
fn paper_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.epochs, 30);
    assert_eq!((cfg.n_support, cfg.n_query, cfg.contrastive_domains, cfg.per_domain), (16, 48, 2, 8));
    assert!(cfg.include_query_in_x);
    assert_eq!(cfg.base_lr, 3e-3);
    assert_eq!(cfg.episodes_per_epoch(1800), 29);
}

#[test]
fn width_mismatch_fails_before_training() {
    let bench = toy_bench(0);
    let cfg = vdpg_core::model::ModelConfig {
        d: 16,
        ..toy_model()
    };
    let init = ModelParameters::init(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train(&bench.sources, &toy_train(1), init, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn identical_runs_are_bit_identical() {
    let bench = toy_bench(1);
    let cfg = TrainConfig {
        seed: 4,
        pretrain: true,
        ..toy_train(2)
    };
    let a = fit(&bench.sources, &[], &toy_model(), &cfg, None).unwrap();
    let b = fit(&bench.sources, &[], &toy_model(), &cfg, None).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    let c = fit(&bench.sources, &[], &toy_model(), &TrainConfig { seed: 5, ..cfg }, None).unwrap();
    assert_ne!(a.params.checksum(), c.params.checksum());
}

#[test]
fn checkpoints_per_epoch_and_final() {
    let bench = toy_bench(0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_train(3);
    let run = fit(&bench.sources, &[], &toy_model(), &cfg, Some(dir.path())).unwrap();
    for e in 0..3 {
        let (_, meta) = load_checkpoint(dir.path().join(format!("episodic-epoch-{e:03}.vdpc"))).unwrap();
        assert!(!meta.is_final);
        assert_eq!(meta.step, 10 * (e as u64 + 1));
    }
    let (params, meta) = load_checkpoint(dir.path().join("final.vdpc")).unwrap();
    assert!(meta.is_final);
    assert_eq!(meta.loss_weights, cfg.loss);
    assert_eq!(params, run.params);
    assert_eq!(run.log.entries.len(), 30);
    // lr follows the cosine schedule
    let opt = OptimizerState::new(cfg.base_lr, 30);
    for e in &run.log.entries {
        assert_eq!(e.lr, opt.schedule.lr(e.step));
    }
}

#[test]
fn task_only_step_matches_hand_built_update() {
    let bench = toy_bench(2);
    let pool = DomainPool::from_datasets(&bench.sources);
    let cfg = TrainConfig {
        contrastive_domains: 0,
        loss: LossWeights {
            lambda_corr: 0.0,
            gamma_dac: 0.0,
            ..LossWeights::default()
        },
        ..toy_train(1)
    };
    let mut r = rng::seeded(1);
    let ep = draw_episode(&pool, &cfg, &mut r).unwrap();
    assert_eq!(ep.contrastive_domain_count(), 1);

    let init = ModelParameters::init(&toy_model(), 3).unwrap();
    let mut trained = init.clone();
    let mut opt = OptimizerState::new(0.1, 10);
    train_episode(&mut trained, &pool, &ep, &cfg, &mut opt, &BTreeSet::new()).unwrap();

    // the same step from the model primitives and the task loss alone
    let mut g = Graph::new();
    let vars = init.register(&mut g);
    let fwd = Forward::new(&init.config, &vars);
    let cache = fwd.generator_cache(&mut g).unwrap();
    let support: Vec<_> = ep.support.iter().map(|r| g.constant(pool.get(*r).tokens.clone())).collect();
    let prompt = fwd.generate_pooled(&mut g, &cache, &support).unwrap();
    let prepared = fwd.prepare_prompt(&mut g, prompt).unwrap();
    let mut outs = Vec::new();
    let mut classes = Vec::new();
    for r in &ep.query {
        let x = g.constant(pool.get(*r).tokens.clone());
        outs.push(fwd.guide(&mut g, prepared, x).unwrap());
        classes.push(pool.get(*r).label.class().unwrap());
    }
    let stacked = g.concat_rows(&outs).unwrap();
    let loss = task_loss(&mut g, stacked, &Targets::Classes(classes), Task::Classification).unwrap();
    let grads = g.backward(loss).unwrap();
    let named: ParamSet = vars.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect();
    let mut manual = init.tensors.clone();
    OptimizerState::new(0.1, 10)
        .sgd_step(&mut manual, &named, &BTreeSet::new())
        .unwrap();
    for (name, t) in &manual {
        assert!(t.max_abs_diff(&trained.tensors[name]) < 1e-14, "{name}");
    }
}

#[test]
fn one_episode_is_reproducible() {
    let bench = toy_bench(0);
    let pool = DomainPool::from_datasets(&bench.sources);
    let cfg = toy_train(1);
    let step = || {
        let mut r = rng::seeded(9);
        let ep = draw_episode(&pool, &cfg, &mut r).unwrap();
        let mut p = ModelParameters::init(&toy_model(), 0).unwrap();
        let mut opt = OptimizerState::new(0.1, 10);
        let e = train_episode(&mut p, &pool, &ep, &cfg, &mut opt, &BTreeSet::new()).unwrap();
        (p.checksum(), serde_json::to_string(&e).unwrap())
    };
    assert_eq!(step(), step());
}

#[test]
fn frozen_generator_stays_bit_stable() {
    let bench = toy_bench(0);
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let cfg = TrainConfig {
        freeze_generator: true,
        weight_decay: 0.01,
        ..toy_train(1)
    };
    let run = train(&bench.sources, &cfg, init.clone(), None).unwrap();
    for name in init.generator_names() {
        assert_eq!(run.params.tensors[name], init.tensors[name], "{name}");
    }
    assert_ne!(run.params.tensors["head.w2"], init.tensors["head.w2"]);
}

fn source_accuracy(params: &ModelParameters, ds: &[Dataset]) -> f64 {
    eval_model(params, ds, &PromptSource::Generated, &EvalProtocol::default())
        .unwrap()
        .metrics
        .accuracy()
}

#[test]
fn two_hundred_episodes_learn_the_task() {
    let bench = toy_bench(0);
    let cfg = toy_train(20);
    let run = fit(&bench.sources, &[], &toy_model(), &cfg, None).unwrap();
    assert_eq!(run.log.entries.len(), 200);
    let acc = source_accuracy(&run.params, &bench.sources);
    assert!(acc >= 1.0 / 3.0 + 0.2, "accuracy {acc}");

    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let n = run.log.entries.len() / 10;
    let mut head: Vec<f64> = run.log.entries[..n].iter().map(|e| e.total).collect();
    let mut tail: Vec<f64> = run.log.entries[run.log.entries.len() - n..].iter().map(|e| e.total).collect();
    assert!(median(&mut tail) < median(&mut head));
}

#[test]
fn erm_beats_untrained_model() {
    let bench = toy_bench(0);
    let cfg = TrainConfig {
        mode: TrainingMode::Erm,
        ..toy_train(20)
    };
    let run = fit(&bench.sources, &[], &toy_model(), &cfg, None).unwrap();
    assert!(run.log.entries.iter().all(|e| e.phase == "erm"));
    let init = ModelParameters::init(&toy_model(), cfg.seed).unwrap();
    assert!(source_accuracy(&run.params, &bench.sources) > source_accuracy(&init, &bench.sources) + 0.1);
}

#[test]
fn pretraining_touches_only_bank_and_generator() {
    let bench = toy_bench(0);
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let run = pretrain_unlabeled(&bench.sources, &toy_train(1), init.clone(), None).unwrap();
    for name in init.guidance_names() {
        assert_eq!(run.params.tensors[name], init.tensors[name], "{name}");
    }
    assert_ne!(run.params.bank(), init.bank());
    assert!(run.log.entries.iter().all(|e| e.task == 0.0));
}

/// A fresh bank with Z ≤ d is not orthogonal; optimizing the decorrelation
/// term alone drives it down.
#[test]
fn corr_only_training_decorrelates_the_bank() {
    let bench = toy_bench(0);
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let before = corr_loss_value(init.bank(), CorrNorm::Frobenius).unwrap();
    assert!(before > 0.0);
    let cfg = TrainConfig {
        loss: LossWeights {
            gamma_dac: 0.0,
            ..LossWeights::default()
        },
        ..toy_train(1)
    };
    let run = pretrain_unlabeled(&bench.sources, &cfg, init, None).unwrap();
    let after = corr_loss_value(run.params.bank(), CorrNorm::Frobenius).unwrap();
    assert!(after < before, "{before} -> {after}");
    let curve: Vec<f64> = run.log.entries.iter().map(|e| e.corr).collect();
    assert!(curve.last().unwrap() < curve.first().unwrap());
}

#[test]
fn pretraining_ignores_labels() {
    let bench = toy_bench(0);
    let scrambled: Vec<Dataset> = bench
        .sources
        .iter()
        .map(|ds| {
            let mut ds = ds.clone();
            for (i, r) in ds.records.iter_mut().enumerate() {
                r.label = if i % 2 == 0 { Label::Unlabeled } else { Label::Class(0) };
            }
            ds
        })
        .collect();
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let a = pretrain_unlabeled(&bench.sources, &toy_train(1), init.clone(), None).unwrap();
    let b = pretrain_unlabeled(&scrambled, &toy_train(1), init, None).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn pretraining_needs_two_domains() {
    let bench = toy_bench(0);
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let err = pretrain_unlabeled(&bench.sources[..1], &toy_train(1), init, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn pretraining_lowers_held_out_contrastive_loss() {
    let cfg = common::toy_synth(3);
    let bench = vdpg_core::data::synth_generate(&vdpg_core::data::SyntheticConfig {
        num_unlabeled_domains: 4,
        ..cfg
    })
    .unwrap();
    // held-out records from the target domains, never seen in pretraining
    let mut recs = Vec::new();
    let mut ids = Vec::new();
    for ds in &bench.targets {
        for r in ds.records.iter().take(12) {
            recs.push(&r.tokens);
            ids.push(r.domain_id);
        }
    }
    let dac = |p: &ModelParameters| {
        let prompts = instance_prompts(p, &recs).unwrap();
        dac_loss_value(&prompts, &ids, 0.1, PromptDistance::MeanSquared).unwrap()
    };
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    let before = dac(&init);
    let pre_cfg = TrainConfig {
        pretrain_epochs: 15,
        ..toy_train(1)
    };
    let run = pretrain_unlabeled(&bench.unlabeled, &pre_cfg, init, None).unwrap();
    let after = dac(&run.params);
    assert!(after < before, "{before} -> {after}");

    // and the training curve trends down
    let n = run.log.entries.len() / 5;
    let mean = |s: &[LogEntry]| s.iter().map(|e| e.dac).sum::<f64>() / s.len() as f64;
    assert!(mean(&run.log.entries[run.log.entries.len() - n..]) < mean(&run.log.entries[..n]));
}

#[test]
fn pretrained_checkpoint_feeds_episodic_training() {
    let bench = toy_bench(0);
    let dir = tempfile::tempdir().unwrap();
    let init = ModelParameters::init(&toy_model(), 0).unwrap();
    pretrain_unlabeled(&bench.sources, &toy_train(1), init.clone(), Some(dir.path())).unwrap();
    let (pre, meta) = load_checkpoint(dir.path().join("pretrain-final.vdpc")).unwrap();
    assert_eq!(meta.phase, "pretrain");
    // the guidance module is still at its fresh initialization
    for name in init.guidance_names() {
        assert_eq!(pre.tensors[name], init.tensors[name]);
    }
    let run = train(&bench.sources, &toy_train(1), pre.clone(), None).unwrap();
    assert_ne!(run.params.bank(), pre.bank());
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let bench = toy_bench(0);
    let cfg = TrainConfig {
        early_stop: Some(EarlyStop {
            holdout_fraction: 0.25,
            patience: 1,
        }),
        ..toy_train(6)
    };
    let run = fit(&bench.sources, &[], &toy_model(), &cfg, None).unwrap();
    let epochs_run = run.log.entries.last().unwrap().epoch + 1;
    match run.stopped_after {
        Some(e) => assert_eq!(e + 1, epochs_run),
        None => assert_eq!(epochs_run, 6),
    }
}

#[test]
fn eval_adaptation_and_evaluation_are_disjoint() {
    let bench = toy_bench(0);
    let p = ModelParameters::init(&toy_model(), 0).unwrap();
    let report = eval_model(&p, &bench.targets, &PromptSource::Generated, &EvalProtocol { k: 16, seed: 2 }).unwrap();
    for d in &report.domains {
        let a: BTreeSet<_> = d.split.adapt.iter().collect();
        assert_eq!(a.len(), 16);
        assert!(d.split.eval.iter().all(|i| !a.contains(i)));
        assert_eq!(d.split.adapt.len() + d.split.eval.len(), 40);
    }
    assert_eq!(report.metrics.per_domain.len(), 2);
    let worst = report.metrics.per_domain.iter().filter_map(|m| m.accuracy).fold(1.0, f64::min);
    assert_eq!(report.metrics.worst_accuracy, Some(worst));
}

#[test]
fn tiny_domain_adapts_on_all_but_one() {
    let bench = toy_bench(0);
    let mut ds = bench.targets[0].clone();
    ds.records.truncate(10);
    let p = ModelParameters::init(&toy_model(), 0).unwrap();
    let report = eval_model(&p, &[ds], &PromptSource::Generated, &EvalProtocol::default()).unwrap();
    assert_eq!(report.domains[0].split.adapt.len(), 9);
    assert_eq!(report.domains[0].split.eval.len(), 1);
}

#[test]
fn regression_task_trains_and_scores() {
    let bench = toy_bench(0);
    let to_regression = |ds: &Dataset| {
        let records = ds
            .records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.label = Label::Value(r.label.class().unwrap() as f64);
                r
            })
            .collect();
        Dataset::new(vdpg_core::data::DatasetHeader::regression(ds.d(), ds.l()), records).unwrap()
    };
    let sources: Vec<Dataset> = bench.sources.iter().map(to_regression).collect();
    let model = vdpg_core::model::ModelConfig {
        task: Task::Regression,
        ..toy_model()
    };
    let cfg = toy_train(20);
    let run = fit(&sources, &[], &model, &cfg, None).unwrap();
    let m = eval_model(&run.params, &sources, &PromptSource::Generated, &EvalProtocol::default())
        .unwrap()
        .metrics;
    assert!(m.overall.pearson.unwrap() > 0.5, "{m:?}");
    assert!(m.overall.accuracy.is_none());
}

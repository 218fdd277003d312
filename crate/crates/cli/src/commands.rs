use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde_json::{json, Value};
use vdpg_core::data::{import_manifest, oracle_accuracy, synth_generate, write_dataset, Dataset, Label, Task};
use vdpg_core::model::{
    export_prompt, generate_prompt, import_prompt, load_checkpoint, save_checkpoint, CheckpointMeta,
    ModelParameters,
};
use vdpg_core::runtime::infer as run_infer;
use vdpg_core::tensor::Tensor;
use vdpg_core::trainer::{
    argmax, eval_model, fit, objective_grad_check, pretrain_unlabeled, train as run_train, train_erm,
    EvalProtocol, EvalReport, PromptSource, TrainConfig, TrainRun, TrainingMode,
};
use vdpg_core::Error;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::{fmt_opt, load_split, require_split, table, RunDir};
use crate::{Common, Protocol, Replacement, Suite};

const GRADCHECK_TOL: f64 = 1e-4;

fn config(common: &Common) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(common.config.as_deref())?.with_seed(common.seed))
}

fn write_split(dir: &RunDir, prefix: &str, sets: &[Dataset]) -> Result<(), CliError> {
    for (i, ds) in sets.iter().enumerate() {
        write_dataset(ds, dir.join(&format!("{prefix}-{i:02}.vdpg")))?;
    }
    Ok(())
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = config(common)?;
    let bench = synth_generate(&cfg.data)?;
    let dir = RunDir::create(common.out.as_deref(), "gen-data", &cfg)?;
    write_split(&dir, "source", &bench.sources)?;
    write_split(&dir, "target", &bench.targets)?;
    write_split(&dir, "unlabeled", &bench.unlabeled)?;
    dir.write("generative.json", serde_json::to_string_pretty(&bench.params).expect("params serialize"))?;

    let degenerate = cfg.data.is_shift_free();
    if degenerate {
        warn!("degenerate: no domain shift");
    }
    let mut rows = Vec::new();
    for (split, sets) in [("source", &bench.sources), ("target", &bench.targets)] {
        for (i, ds) in sets.iter().enumerate() {
            rows.push(json!({
                "kind": "dataset",
                "split": split,
                "index": i,
                "domain_ids": ds.domain_ids(),
                "records": ds.len(),
                "oracle_accuracy": oracle_accuracy(&bench.params, ds)?,
            }));
        }
    }
    rows.push(json!({
        "kind": "summary",
        "sources": bench.sources.len(),
        "targets": bench.targets.len(),
        "unlabeled": bench.unlabeled.len(),
        "flags": if degenerate { vec!["degenerate: no domain shift"] } else { vec![] },
    }));
    dir.write_jsonl("oracle.jsonl", &rows)?;
    println!("{}", dir.path.display());
    Ok(())
}

pub fn import(common: &Common, manifest: &Path) -> Result<(), CliError> {
    let cfg = config(common)?;
    let ds = import_manifest(manifest)?;
    let dir = RunDir::create(common.out.as_deref(), "import", &cfg)?;
    write_dataset(&ds, dir.join("dataset.vdpg"))?;
    dir.write_jsonl(
        "import.jsonl",
        &[json!({"records": ds.len(), "domain_ids": ds.domain_ids(), "d": ds.d()})],
    )?;
    println!("{}", dir.path.display());
    Ok(())
}

fn write_run(dir: &RunDir, run: &TrainRun) -> Result<(), CliError> {
    run.log.write_jsonl(dir.join("log.jsonl"))?;
    run.write_timings(dir.join("timings.jsonl"))?;
    if let Some(e) = run.stopped_after {
        info!("early stopping after epoch {e}");
    }
    Ok(())
}

pub fn pretrain(common: &Common, data: &Path) -> Result<(), CliError> {
    let cfg = config(common)?;
    let mut sets = load_split(data, "unlabeled")?;
    if sets.is_empty() {
        info!("no unlabeled datasets; pretraining on label-free views of the sources");
        sets = require_split(data, "source")?;
    }
    let init = ModelParameters::init(&cfg.model, cfg.train.seed)?;
    let dir = RunDir::create(common.out.as_deref(), "pretrain", &cfg)?;
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let run = pretrain_unlabeled(&sets, &cfg.train, init, Some(&ckpt))?;
    write_run(&dir, &run)?;
    println!("{}", ckpt.join("pretrain-final.vdpc").display());
    Ok(())
}

pub fn train(common: &Common, data: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = config(common)?;
    let sources = require_split(data, "source")?;
    let init = match checkpoint {
        Some(p) => {
            let (params, meta) = load_checkpoint(p)?;
            cfg.model = meta.model;
            Some(params)
        }
        None => None,
    };
    let dir = RunDir::create(common.out.as_deref(), "train", &cfg)?;
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let run = match init {
        Some(params) => match cfg.train.mode {
            TrainingMode::Episodic => run_train(&sources, &cfg.train, params, Some(&ckpt))?,
            TrainingMode::Erm => train_erm(&sources, &cfg.train, params, Some(&ckpt))?,
        },
        None => {
            let unlabeled = load_split(data, "unlabeled")?;
            fit(&sources, &unlabeled, &cfg.model, &cfg.train, Some(&ckpt))?
        }
    };
    write_run(&dir, &run)?;
    println!("{}", ckpt.join("final.vdpc").display());
    Ok(())
}

/// Parameters plus a config whose model section matches the checkpoint.
fn load_model(common: &Common, checkpoint: &Path) -> Result<(RunConfig, ModelParameters), CliError> {
    let mut cfg = config(common)?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    cfg.model = meta.model;
    Ok((cfg, params))
}

fn domain_tokens(ds: &Dataset, id: u32) -> Vec<&Tensor> {
    ds.records.iter().filter(|r| r.domain_id == id).map(|r| &r.tokens).collect()
}

pub fn adapt(common: &Common, checkpoint: &Path, data: &Path, k: Option<usize>) -> Result<(), CliError> {
    let (mut cfg, params) = load_model(common, checkpoint)?;
    cfg.eval.k = k.unwrap_or(cfg.eval.k);
    let sets = require_split(data, "target")?;
    let dir = RunDir::create(common.out.as_deref(), "adapt", &cfg)?;
    let mut rows = Vec::new();
    for ds in &sets {
        for id in ds.domain_ids() {
            let recs = domain_tokens(ds, id);
            let t = Instant::now();
            let prompt = generate_prompt(&params, &recs[..cfg.eval.k.min(recs.len())], Some(id))?;
            let secs = t.elapsed().as_secs_f64();
            let file = format!("prompt-{id:04}.vdpp");
            export_prompt(&prompt, dir.join(&file))?;
            rows.push(json!({"domain_id": id, "file": file, "provenance": prompt.provenance, "seconds": secs}));
        }
    }
    dir.write_jsonl("prompts.jsonl", &rows)?;
    println!("{}", dir.path.display());
    Ok(())
}

fn label_value(label: Label) -> Value {
    match label {
        Label::Class(c) => json!(c),
        Label::Value(v) => json!(v),
        Label::Unlabeled => Value::Null,
    }
}

pub fn infer(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    prompt: Option<&Path>,
    k: Option<usize>,
) -> Result<(), CliError> {
    let (mut cfg, params) = load_model(common, checkpoint)?;
    cfg.eval.k = k.unwrap_or(cfg.eval.k);
    let given = prompt.map(import_prompt).transpose()?;
    let sets = require_split(data, "target")?;
    let dir = RunDir::create(common.out.as_deref(), "infer", &cfg)?;
    let classify = cfg.model.task == Task::Classification;
    let mut rows = Vec::new();
    let mut n = 0usize;
    let t = Instant::now();
    for ds in &sets {
        for id in ds.domain_ids() {
            let recs: Vec<_> = ds.records.iter().filter(|r| r.domain_id == id).collect();
            let toks: Vec<&Tensor> = recs.iter().map(|r| &r.tokens).collect();
            let p = match &given {
                Some(p) => p.clone(),
                None => generate_prompt(&params, &toks[..cfg.eval.k.min(toks.len())], Some(id))?,
            };
            let out = run_infer(&params, &p, &toks)?;
            for (i, (r, o)) in recs.iter().zip(out).enumerate() {
                let prediction = if classify { json!(argmax(&o)) } else { json!(o[0]) };
                rows.push(json!({
                    "domain_id": id,
                    "index": i,
                    "label": label_value(r.label),
                    "prediction": prediction,
                    "outputs": o,
                }));
            }
            n += recs.len();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    info!("inference on {n} records: {secs:.3}s ({:.0} records/s)", n as f64 / secs.max(1e-12));
    dir.write_jsonl("predictions.jsonl", &rows)?;
    dir.write_jsonl("throughput.jsonl", &[json!({"records": n, "seconds": secs})])?;
    println!("{}", dir.path.display());
    Ok(())
}

fn prompt_source(r: Replacement, seed: u64) -> PromptSource {
    match r {
        Replacement::Generated => PromptSource::Generated,
        Replacement::Zeros => PromptSource::Zeros,
        Replacement::Random => PromptSource::Random { seed },
        Replacement::Bank => PromptSource::Bank,
    }
}

fn metric_rows(report: &EvalReport) -> Vec<Value> {
    let m = &report.metrics;
    let mut rows: Vec<Value> = m
        .per_domain
        .iter()
        .map(|g| {
            let mut v = serde_json::to_value(g).expect("metrics serialize");
            v["kind"] = json!("domain");
            v["source"] = json!(report.source);
            v
        })
        .collect();
    let mut overall = serde_json::to_value(&m.overall).expect("metrics serialize");
    overall["kind"] = json!("overall");
    overall["source"] = json!(report.source);
    overall["worst_accuracy"] = json!(m.worst_accuracy);
    overall["worst_macro_f1"] = json!(m.worst_macro_f1);
    overall["worst_pearson"] = json!(m.worst_pearson);
    overall["max_mse"] = json!(m.max_mse);
    rows.push(overall);
    rows
}

fn metric_table(report: &EvalReport) -> String {
    let m = &report.metrics;
    let mut rows: Vec<Vec<String>> = m
        .per_domain
        .iter()
        .map(|g| {
            vec![
                g.domain_id.map(|d| d.to_string()).unwrap_or_default(),
                g.n.to_string(),
                fmt_opt(g.accuracy),
                fmt_opt(g.macro_f1),
                fmt_opt(g.mse),
                fmt_opt(g.pearson),
            ]
        })
        .collect();
    let o = &m.overall;
    rows.push(vec!["all".into(), o.n.to_string(), fmt_opt(o.accuracy), fmt_opt(o.macro_f1), fmt_opt(o.mse), fmt_opt(o.pearson)]);
    rows.push(vec![
        "worst".into(),
        String::new(),
        fmt_opt(m.worst_accuracy),
        fmt_opt(m.worst_macro_f1),
        fmt_opt(m.max_mse),
        fmt_opt(m.worst_pearson),
    ]);
    table(&["domain", "n", "accuracy", "macro_f1", "mse", "pearson"], &rows)
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    protocol: Protocol,
    k: Option<usize>,
    replacement: Replacement,
) -> Result<(), CliError> {
    let (mut cfg, params) = load_model(common, checkpoint)?;
    cfg.eval.k = k.unwrap_or(cfg.eval.k);
    let targets = require_split(data, "target")?;
    let dir = RunDir::create(common.out.as_deref(), "eval", &cfg)?;
    let report = match protocol {
        Protocol::AdaptPerDomain => {
            eval_model(&params, &targets, &prompt_source(replacement, cfg.eval.seed), &cfg.eval)?
        }
    };
    dir.write_jsonl("metrics.jsonl", &metric_rows(&report))?;
    let summary = metric_table(&report);
    dir.write("summary.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

type Adjust = Box<dyn Fn(TrainConfig) -> TrainConfig>;

fn variants(suite: Suite) -> Vec<(&'static str, Adjust)> {
    let weights = |lambda: f64, gamma: f64| {
        move |mut c: TrainConfig| {
            c.loss.lambda_corr = lambda;
            c.loss.gamma_dac = gamma;
            c
        }
    };
    match suite {
        Suite::Losses => vec![
            ("task", Box::new(weights(0.0, 0.0))),
            ("task+corr", Box::new(weights(0.1, 0.0))),
            ("task+corr+dac", Box::new(|c| c)),
            ("+pretrain", Box::new(|c| TrainConfig { pretrain: true, ..c })),
        ],
        Suite::Scheme => vec![
            ("erm", Box::new(|c| TrainConfig { mode: TrainingMode::Erm, ..c })),
            ("episodic", Box::new(|c| TrainConfig { mode: TrainingMode::Episodic, ..c })),
        ],
        Suite::Replacement => vec![("task+corr+dac", Box::new(|c| c))],
    }
}

pub fn ablate(common: &Common, data: &Path, suite: Suite, seeds: &[u64]) -> Result<(), CliError> {
    let cfg = config(common)?;
    let sources = require_split(data, "source")?;
    let targets = require_split(data, "target")?;
    let unlabeled = load_split(data, "unlabeled")?;
    let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds.to_vec() };
    let dir = RunDir::create(common.out.as_deref(), "ablate", &cfg)?;
    let sources_to_eval: Vec<Replacement> = match suite {
        Suite::Replacement => vec![Replacement::Generated, Replacement::Zeros, Replacement::Random, Replacement::Bank],
        _ => vec![Replacement::Generated],
    };

    let mut rows = Vec::new();
    let mut grid: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, adjust) in variants(suite) {
        for &rep in &sources_to_eval {
            let label = match suite {
                Suite::Replacement => format!("{rep:?}").to_lowercase(),
                _ => name.to_string(),
            };
            if !grid.iter().any(|(l, _)| *l == label) {
                grid.push((label, Vec::new()));
            }
        }
        for &seed in &seeds {
            let tc = adjust(TrainConfig { seed, ..cfg.train.clone() });
            let t = Instant::now();
            let run = fit(&sources, &unlabeled, &cfg.model, &tc, None)?;
            let secs = t.elapsed().as_secs_f64();
            info!("{name} seed {seed}: trained in {secs:.1}s");
            let meta = CheckpointMeta {
                model: cfg.model.clone(),
                seed,
                step: run.log.entries.len() as u64,
                phase: name.into(),
                loss_weights: tc.loss,
                is_final: true,
            };
            let tag = name.replace('+', "_");
            save_checkpoint(&run.params, &meta, dir.join(&format!("{tag}-seed{seed}.vdpc")))?;
            let proto = EvalProtocol { seed, ..cfg.eval };
            for &rep in &sources_to_eval {
                let report = eval_model(&run.params, &targets, &prompt_source(rep, seed), &proto)?;
                let m = &report.metrics;
                let label = match suite {
                    Suite::Replacement => format!("{rep:?}").to_lowercase(),
                    _ => name.to_string(),
                };
                let score = m.overall.accuracy.or(m.overall.pearson).unwrap_or(f64::NAN);
                grid.iter_mut().find(|(l, _)| *l == label).expect("row exists").1.push(score);
                rows.push(json!({
                    "suite": suite_name(suite),
                    "variant": label,
                    "seed": seed,
                    "accuracy": m.overall.accuracy,
                    "macro_f1": m.overall.macro_f1,
                    "worst_accuracy": m.worst_accuracy,
                    "pearson": m.overall.pearson,
                    "train_seconds": secs,
                }));
            }
        }
    }
    dir.write_jsonl("results.jsonl", &rows)?;
    let mut header: Vec<String> = vec!["variant".into()];
    header.extend(seeds.iter().map(|s| format!("seed {s}")));
    header.push("mean".into());
    let body: Vec<Vec<String>> = grid
        .iter()
        .map(|(l, v)| {
            let mut r = vec![l.clone()];
            r.extend(v.iter().map(|x| format!("{x:.4}")));
            r.push(format!("{:.4}", v.iter().sum::<f64>() / v.len() as f64));
            r
        })
        .collect();
    let summary = table(&header.iter().map(String::as_str).collect::<Vec<_>>(), &body);
    dir.write("summary.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::Losses => "losses",
        Suite::Scheme => "scheme",
        Suite::Replacement => "replacement",
    }
}

pub fn gradcheck(common: &Common) -> Result<(), CliError> {
    let cfg = config(common)?;
    let bench = synth_generate(&cfg.data)?;
    if bench.sources.len() < 2 {
        return Err(CliError::Usage("gradcheck needs at least two source domains".into()));
    }
    let params = ModelParameters::init(&cfg.model, cfg.train.seed)?;
    let dir = RunDir::create(common.out.as_deref(), "gradcheck", &cfg)?;
    let t = Instant::now();
    let report = objective_grad_check(&params, &bench.sources[0], &bench.sources[1], &cfg.train.loss, 1e-5)?;
    let secs = t.elapsed().as_secs_f64();
    let pass = report.max_relative_error < GRADCHECK_TOL;
    let record = json!({
        "max_relative_error": report.max_relative_error,
        "entries_checked": report.entries_checked,
        "worst": report.worst,
        "tolerance": GRADCHECK_TOL,
        "seconds": secs,
        "pass": pass,
    });
    dir.write_jsonl("gradcheck.jsonl", &[&record])?;
    println!("{record}");
    if !pass {
        return Err(CliError::Numeric(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOL:.0e}",
            report.max_relative_error
        )));
    }
    Ok(())
}

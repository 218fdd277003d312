//! Episodic meta-training, the ERM baseline, unlabeled pretraining and
//! evaluation.

mod config;
mod episode;
mod eval;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use config::{EarlyStop, TrainConfig, TrainingMode};
pub use episode::{
    episode_loss, erm_loss, pretrain_loss, EpisodeBatch, LossParts, LossValues, MixedBatch,
};
pub use eval::{
    argmax, eval_given, eval_model, eval_with, score, split_domain, DomainOutcome, DomainSplit,
    EvalProtocol, EvalReport, PromptSource,
};
pub use metrics::{GroupMetrics, Metrics};

use crate::data::{
    build_contrastive_batch, sample_episode, Dataset, Domain, DomainPool, Episode, RecordRef,
};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, CheckpointMeta, ModelConfig, ModelParameters};
use crate::objectives::LossWeights;
use crate::rng::{self, EngineRng};
use crate::tensor::{Graph, OptimizerState, ParamSet, Var};

/// One optimization step. Wall time is kept out of this record so that
/// logs of identical runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub phase: String,
    pub step: u64,
    pub epoch: usize,
    pub domain_id: Option<u32>,
    pub task: f64,
    pub corr: f64,
    pub dac: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.entries.extend(other.entries);
    }
}

/// Final parameters, the deterministic log, and per-step wall seconds.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParameters,
    pub log: TrainLog,
    pub wall_seconds: Vec<f64>,
    /// Epoch after which early stopping fired.
    pub stopped_after: Option<usize>,
}

impl TrainRun {
    pub fn write_timings(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (i, s) in self.wall_seconds.iter().enumerate() {
            writeln!(f, "{{\"step\":{i},\"wall_seconds\":{s}}}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn check_compat(cfg: &ModelConfig, datasets: &[Dataset]) -> Result<()> {
    if datasets.is_empty() {
        return Err(Error::config("no training datasets"));
    }
    for ds in datasets {
        if ds.d() != cfg.d {
            return Err(Error::config(format!(
                "dataset width {} does not match model width {}",
                ds.d(),
                cfg.d
            )));
        }
        if ds.header.task != cfg.task {
            return Err(Error::config("dataset task does not match the model task"));
        }
        if cfg.task == crate::data::Task::Classification && ds.header.num_classes as usize > cfg.num_classes
        {
            return Err(Error::config(format!(
                "dataset has {} classes, model head has {}",
                ds.header.num_classes, cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Builds the loss on a fresh tape, checks it, backpropagates, and applies
/// one SGD step to every non-frozen parameter.
fn sgd_update<F>(
    params: &mut ModelParameters,
    opt: &mut OptimizerState,
    frozen: &BTreeSet<String>,
    build: F,
) -> Result<(LossValues, f64)>
where
    F: FnOnce(&mut Graph, &ModelParameters, &BTreeMap<String, Var>) -> Result<LossParts>,
{
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let parts = build(&mut g, params, &vars)?;
    let v = parts.values(&g);
    if ![v.task, v.corr, v.dac, v.total].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss at step {}: task={} corr={} dac={} total={}",
            opt.step, v.task, v.corr, v.dac, v.total
        )));
    }
    let grads = g.backward(parts.total)?;
    let named: ParamSet = vars
        .iter()
        .map(|(k, var)| (k.clone(), grads.get(*var)))
        .collect();
    let lr = opt.sgd_step(&mut params.tensors, &named, frozen)?;
    Ok((v, lr))
}

fn optimizer(cfg: &TrainConfig, total_steps: u64) -> OptimizerState {
    let mut opt = OptimizerState::new(cfg.base_lr, total_steps);
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
    opt.clip_norm = cfg.clip_norm;
    opt
}

/// One episodic step: contrastive loss over the episode's contrastive
/// batch, bank decorrelation, the support prompt guiding every query, and
/// an SGD update of all non-frozen parameters.
pub fn train_episode(
    params: &mut ModelParameters,
    pool: &DomainPool,
    episode: &Episode,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    frozen: &BTreeSet<String>,
) -> Result<LogEntry> {
    episode.check(pool)?;
    let batch = EpisodeBatch::from_episode(pool, episode, params.config.task)?;
    let step = opt.step;
    let (v, lr) = sgd_update(params, opt, frozen, |g, p, vars| {
        episode_loss(g, p, vars, &batch, &cfg.loss)
    })?;
    Ok(LogEntry {
        phase: "episodic".into(),
        step,
        epoch: 0,
        domain_id: Some(episode.domain_id),
        task: v.task,
        corr: v.corr,
        dac: v.dac,
        total: v.total,
        lr,
    })
}

/// Draws one full episode (support, query, contrastive batch).
pub fn draw_episode(pool: &DomainPool, cfg: &TrainConfig, rng: &mut EngineRng) -> Result<Episode> {
    let ep = sample_episode(pool, rng, cfg.n_support, cfg.n_query, cfg.domain_sampling)?;
    Ok(build_contrastive_batch(
        pool,
        ep,
        rng,
        cfg.contrastive_domains,
        cfg.per_domain,
        cfg.include_query_in_x,
    ))
}

/// Where per-epoch checkpoints go and what they are called.
struct Checkpointer<'a> {
    dir: Option<&'a Path>,
    seed: u64,
    phase: &'static str,
}

impl Checkpointer<'_> {
    fn save(
        &self,
        params: &ModelParameters,
        cfg: &TrainConfig,
        step: u64,
        name: &str,
        is_final: bool,
    ) -> Result<Option<PathBuf>> {
        let Some(dir) = self.dir else {
            return Ok(None);
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            model: params.config.clone(),
            seed: self.seed,
            step,
            phase: self.phase.into(),
            loss_weights: cfg.loss,
            is_final,
        };
        let path = dir.join(name);
        save_checkpoint(params, &meta, &path)?;
        Ok(Some(path))
    }
}

/// Splits each domain into a training part and a held-out tail.
fn holdout_split(pool: &DomainPool, fraction: f64, seed: u64) -> (DomainPool, DomainPool) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for dom in &pool.domains {
        let n = dom.records.len();
        let h = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let mut r = rng::stream(seed, 4000 + dom.id as u64);
        let order = sample(&mut r, n, n).into_vec();
        let pick = |idx: &[usize]| Domain {
            id: dom.id,
            records: idx.iter().map(|&i| dom.records[i].clone()).collect(),
        };
        held.push(pick(&order[..h]));
        train.push(pick(&order[h..]));
    }
    (DomainPool { domains: train }, DomainPool { domains: held })
}

fn validation_score(params: &ModelParameters, held: &DomainPool, cfg: &TrainConfig) -> Result<f64> {
    let protocol = EvalProtocol {
        k: cfg.n_support,
        seed: cfg.seed,
    };
    let r = eval_with(params, held, &protocol, "validation".into(), |dom, recs| {
        PromptSource::Generated.prompt_for(params, dom.id, recs)
    })?;
    let o = &r.metrics.overall;
    Ok(o.accuracy.or(o.mse.map(|m| -m)).unwrap_or(f64::NEG_INFINITY))
}

/// Shared outer loop of the supervised trainers. `step_fn` runs one step
/// and returns its log entry with the epoch left at zero.
fn run_supervised<F>(
    pool: &DomainPool,
    cfg: &TrainConfig,
    init: ModelParameters,
    ckpt_dir: Option<&Path>,
    phase: &'static str,
    mut step_fn: F,
) -> Result<TrainRun>
where
    F: FnMut(
        &mut ModelParameters,
        &DomainPool,
        &mut EngineRng,
        &mut OptimizerState,
        &BTreeSet<String>,
    ) -> Result<LogEntry>,
{
    let (train_pool, held) = match cfg.early_stop {
        Some(es) => {
            let (t, h) = holdout_split(pool, es.holdout_fraction, cfg.seed);
            (t, Some(h))
        }
        None => (pool.clone(), None),
    };
    let per_epoch = cfg.episodes_per_epoch(pool.total_records());
    let total = (cfg.epochs * per_epoch) as u64;
    let mut opt = optimizer(cfg, total);
    let frozen: BTreeSet<String> = if cfg.freeze_generator {
        init.generator_names().cloned().collect()
    } else {
        BTreeSet::new()
    };
    let ckpt = Checkpointer {
        dir: ckpt_dir,
        seed: cfg.seed,
        phase,
    };
    let mut params = init;
    let mut rng = rng::stream(cfg.seed, 100);
    let mut log = TrainLog::default();
    let mut wall = Vec::with_capacity(total as usize);
    let mut best: Option<(f64, ModelParameters)> = None;
    let mut since_best = 0usize;
    let mut stopped_after = None;

    info!("{phase}: {} epochs x {per_epoch} steps", cfg.epochs);
    for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let t0 = Instant::now();
            let mut entry = step_fn(&mut params, &train_pool, &mut rng, &mut opt, &frozen)?;
            entry.epoch = epoch;
            wall.push(t0.elapsed().as_secs_f64());
            debug!("{}", serde_json::to_string(&entry).unwrap_or_default());
            log.entries.push(entry);
        }
        ckpt.save(&params, cfg, opt.step, &format!("{phase}-epoch-{epoch:03}.vdpc"), false)?;
        if let (Some(es), Some(held)) = (cfg.early_stop, &held) {
            let s = validation_score(&params, held, cfg)?;
            info!("{phase}: epoch {epoch} validation {s:.4}");
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    stopped_after = Some(epoch);
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    ckpt.save(&params, cfg, opt.step, "final.vdpc", true)?;
    Ok(TrainRun {
        params,
        log,
        wall_seconds: wall,
        stopped_after,
    })
}

/// Episodic meta-training from `init` over the source domains in
/// `datasets`. `epochs = 0` returns `init` unchanged.
pub fn train(
    datasets: &[Dataset],
    cfg: &TrainConfig,
    init: ModelParameters,
    ckpt_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    check_compat(&init.config, datasets)?;
    let pool = DomainPool::from_datasets(datasets);
    run_supervised(&pool, cfg, init, ckpt_dir, "episodic", |params, pool, rng, opt, frozen| {
        let ep = draw_episode(pool, cfg, rng)?;
        train_episode(params, pool, &ep, cfg, opt, frozen)
    })
}

/// Non-episodic baseline: mixed-domain labeled batches, each record guided
/// by the prompt pooled over its own domain's records in the batch.
pub fn train_erm(
    datasets: &[Dataset],
    cfg: &TrainConfig,
    init: ModelParameters,
    ckpt_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    check_compat(&init.config, datasets)?;
    let pool = DomainPool::from_datasets(datasets);
    let task = init.config.task;
    run_supervised(&pool, cfg, init, ckpt_dir, "erm", |params, pool, rng, opt, frozen| {
        let refs: Vec<RecordRef> = pool
            .domains
            .iter()
            .enumerate()
            .flat_map(|(domain, d)| (0..d.records.len()).map(move |index| RecordRef { domain, index }))
            .collect();
        let take = cfg.erm_batch_size.min(refs.len());
        let mut picked = sample(rng, refs.len(), take).into_vec();
        picked.sort_unstable();
        let recs: Vec<_> = picked.iter().map(|&i| pool.get(refs[i])).collect();
        let batch = MixedBatch {
            records: recs.iter().map(|r| (&r.tokens, r.domain_id)).collect(),
            targets: episode::targets_of(recs.iter().map(|r| r.label), task)?,
        };
        let step = opt.step;
        let (v, lr) = sgd_update(params, opt, frozen, |g, p, vars| {
            erm_loss(g, p, vars, &batch, &cfg.loss)
        })?;
        Ok(LogEntry {
            phase: "erm".into(),
            step,
            epoch: 0,
            domain_id: None,
            task: v.task,
            corr: v.corr,
            dac: v.dac,
            total: v.total,
            lr,
        })
    })
}

/// Trains the bank and generator on `λ·corr + γ·dac` over unlabeled
/// contrastive batches. Guidance, CLS and head stay bit-identical.
pub fn pretrain_unlabeled(
    datasets: &[Dataset],
    cfg: &TrainConfig,
    init: ModelParameters,
    ckpt_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    for ds in datasets {
        if ds.d() != init.config.d {
            return Err(Error::config("unlabeled dataset width does not match the model"));
        }
    }
    let pool = DomainPool::from_datasets(datasets);
    if pool.len() < 2 {
        return Err(Error::config(
            "pretraining needs at least two domains; the contrastive loss is undefined otherwise",
        ));
    }
    if cfg.loss.gamma_dac == 0.0 && cfg.loss.lambda_corr == 0.0 {
        return Err(Error::config("pretraining with both loss weights at zero does nothing"));
    }
    let per_epoch = cfg.episodes_per_epoch(pool.total_records());
    let total = (cfg.pretrain_epochs * per_epoch) as u64;
    let mut opt = optimizer(cfg, total);
    let frozen: BTreeSet<String> = init.guidance_names().cloned().collect();
    let ckpt = Checkpointer {
        dir: ckpt_dir,
        seed: cfg.seed,
        phase: "pretrain",
    };
    let mut params = init;
    let mut rng = rng::stream(cfg.seed, 101);
    let mut log = TrainLog::default();
    let mut wall = Vec::with_capacity(total as usize);
    info!("pretrain: {} epochs x {per_epoch} steps", cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        for _ in 0..per_epoch {
            let t0 = Instant::now();
            let ep = draw_episode(&pool, cfg, &mut rng)?;
            let views: Vec<_> = ep.contrastive.iter().map(|(r, _)| pool.get(*r).unlabeled()).collect();
            let step = opt.step;
            let (v, lr) = sgd_update(&mut params, &mut opt, &frozen, |g, p, vars| {
                pretrain_loss(g, p, vars, &views, &cfg.loss)
            })?;
            wall.push(t0.elapsed().as_secs_f64());
            log.entries.push(LogEntry {
                phase: "pretrain".into(),
                step,
                epoch,
                domain_id: Some(ep.domain_id),
                task: v.task,
                corr: v.corr,
                dac: v.dac,
                total: v.total,
                lr,
            });
        }
        ckpt.save(&params, cfg, opt.step, &format!("pretrain-epoch-{epoch:03}.vdpc"), false)?;
    }
    ckpt.save(&params, cfg, opt.step, "pretrain-final.vdpc", true)?;
    Ok(TrainRun {
        params,
        log,
        wall_seconds: wall,
        stopped_after: None,
    })
}

/// Initializes from `model` and `cfg.seed`, optionally pretrains on
/// `unlabeled` (falling back to label-free views of the sources), then
/// runs the configured supervised mode.
pub fn fit(
    sources: &[Dataset],
    unlabeled: &[Dataset],
    model: &ModelConfig,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainRun> {
    cfg.validate()?;
    check_compat(model, sources)?;
    let mut params = ModelParameters::init(model, cfg.seed)?;
    let mut log = TrainLog::default();
    let mut wall = Vec::new();
    if cfg.pretrain {
        let pool_src = if unlabeled.is_empty() { sources } else { unlabeled };
        let pre = pretrain_unlabeled(pool_src, cfg, params, ckpt_dir)?;
        params = pre.params;
        log.extend(pre.log);
        wall.extend(pre.wall_seconds);
    }
    let run = match cfg.mode {
        TrainingMode::Episodic => train(sources, cfg, params, ckpt_dir)?,
        TrainingMode::Erm => train_erm(sources, cfg, params, ckpt_dir)?,
    };
    log.extend(run.log);
    wall.extend(run.wall_seconds);
    Ok(TrainRun {
        params: run.params,
        log,
        wall_seconds: wall,
        stopped_after: run.stopped_after,
    })
}

/// Finite-difference check of the complete weighted objective: two support
/// and two query records from `own`, plus two records of `other` so the
/// contrastive batch spans two domains.
pub fn objective_grad_check(
    params: &ModelParameters,
    own: &Dataset,
    other: &Dataset,
    w: &LossWeights,
    eps: f64,
) -> Result<crate::tensor::GradCheckReport> {
    if own.len() < 4 || other.len() < 2 {
        return Err(Error::contract("gradient check needs 4 records of one domain and 2 of another"));
    }
    let own = &own.records;
    let other = &other.records;
    let query = [&own[2], &own[3]];
    let mut contrastive: Vec<_> = own[..4].iter().map(|r| (&r.tokens, r.domain_id)).collect();
    contrastive.extend(other[..2].iter().map(|r| (&r.tokens, r.domain_id)));
    let batch = EpisodeBatch {
        support: vec![&own[0].tokens, &own[1].tokens],
        query: query.iter().map(|r| &r.tokens).collect(),
        targets: episode::targets_of(query.iter().map(|r| r.label), params.config.task)?,
        contrastive,
    };
    crate::tensor::grad_check(
        |g, vars| Ok(episode_loss(g, params, vars, &batch, w)?.total),
        &params.tensors,
        eps,
        None,
    )
}

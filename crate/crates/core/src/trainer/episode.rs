//! Loss graphs for one training step.

use std::collections::BTreeMap;

use crate::data::{DomainPool, Episode, Label, Task, UnlabeledView};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelParameters, BANK};
use crate::objectives::{corr_loss, dac_loss, task_loss, total_loss, LossWeights, Targets};
use crate::tensor::{Graph, Tensor, Var};

/// Borrowed inputs of one episodic step.
#[derive(Debug, Clone)]
pub struct EpisodeBatch<'a> {
    pub support: Vec<&'a Tensor>,
    pub query: Vec<&'a Tensor>,
    pub targets: Targets,
    pub contrastive: Vec<(&'a Tensor, u32)>,
}

impl<'a> EpisodeBatch<'a> {
    pub fn from_episode(pool: &'a DomainPool, ep: &Episode, task: Task) -> Result<Self> {
        let support = ep.support.iter().map(|r| &pool.get(*r).tokens).collect();
        let query: Vec<_> = ep.query.iter().map(|r| pool.get(*r)).collect();
        let targets = targets_of(query.iter().map(|r| r.label), task)?;
        Ok(Self {
            support,
            query: query.iter().map(|r| &r.tokens).collect(),
            targets,
            contrastive: ep
                .contrastive
                .iter()
                .map(|(r, d)| (&pool.get(*r).tokens, *d))
                .collect(),
        })
    }
}

pub(crate) fn targets_of(labels: impl Iterator<Item = Label>, task: Task) -> Result<Targets> {
    match task {
        Task::Classification => labels
            .map(|l| l.class().ok_or_else(|| Error::contract("query record is unlabeled")))
            .collect::<Result<Vec<_>>>()
            .map(Targets::Classes),
        Task::Regression => labels
            .map(|l| l.value().ok_or_else(|| Error::contract("query record is unlabeled")))
            .collect::<Result<Vec<_>>>()
            .map(Targets::Values),
    }
}

/// Scalar loss nodes of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub task: Var,
    pub corr: Var,
    pub dac: Var,
    pub total: Var,
}

/// Loss component values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub task: f64,
    pub corr: f64,
    pub dac: f64,
    pub total: f64,
}

impl LossParts {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).data()[0];
        LossValues {
            task: v(self.task),
            corr: v(self.corr),
            dac: v(self.dac),
            total: v(self.total),
        }
    }
}

fn same_tensor(a: &Tensor, b: &Tensor) -> bool {
    std::ptr::eq(a, b)
}

/// Per-image prompts for a contrastive batch plus the generator outputs of
/// a leading run of `reuse` tensors, which are shared with the pooled
/// support prompt.
fn contrastive_term(
    g: &mut Graph,
    fwd: &Forward<'_>,
    cache: &crate::model::GeneratorCache,
    contrastive: &[(&Tensor, u32)],
    support: &[&Tensor],
    w: &LossWeights,
) -> Result<(Var, Vec<Var>)> {
    let mut support_outputs = Vec::new();
    if w.gamma_dac == 0.0 || contrastive.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), support_outputs));
    }
    let mut prompts = Vec::with_capacity(contrastive.len());
    let mut ids = Vec::with_capacity(contrastive.len());
    for (i, (t, id)) in contrastive.iter().enumerate() {
        let x = g.constant((*t).clone());
        let p = fwd.generate_single(g, cache, x)?;
        if i == support_outputs.len() && i < support.len() && same_tensor(t, support[i]) {
            support_outputs.push(p);
        }
        prompts.push(p);
        ids.push(*id);
    }
    let dac = dac_loss(g, &prompts, &ids, w.tau, w.distance)?;
    Ok((dac, support_outputs))
}

/// Builds the full objective of one episode:
/// contrastive loss over per-image prompts of the contrastive batch, bank
/// decorrelation, the pooled support prompt guiding every query, and the
/// task loss on the query labels.
pub fn episode_loss(
    g: &mut Graph,
    params: &ModelParameters,
    vars: &BTreeMap<String, Var>,
    batch: &EpisodeBatch<'_>,
    w: &LossWeights,
) -> Result<LossParts> {
    let cfg = &params.config;
    let fwd = Forward::new(cfg, vars);
    let cache = fwd.generator_cache(g)?;

    let (dac, reused) = contrastive_term(g, &fwd, &cache, &batch.contrastive, &batch.support, w)?;
    let corr = corr_loss(g, vars[BANK], w.corr_norm)?;

    let mut support_outputs = reused;
    for t in &batch.support[support_outputs.len()..] {
        let x = g.constant((*t).clone());
        support_outputs.push(fwd.generate_single(g, &cache, x)?);
    }
    let prompt = if support_outputs.len() == 1 {
        support_outputs[0]
    } else {
        g.mean_stack(&support_outputs)?
    };

    let prepared = fwd.prepare_prompt(g, prompt)?;
    let mut outputs = Vec::with_capacity(batch.query.len());
    for t in &batch.query {
        let x = g.constant((*t).clone());
        outputs.push(fwd.guide(g, prepared, x)?);
    }
    let stacked = g.concat_rows(&outputs)?;
    let task = task_loss(g, stacked, &batch.targets, cfg.task)?;
    let total = total_loss(g, task, corr, dac, w)?;
    Ok(LossParts {
        task,
        corr,
        dac,
        total,
    })
}

/// Inputs of one ERM step: a mixed-domain labeled batch. Every record is
/// guided by the prompt pooled over the batch records of its own domain,
/// itself included.
#[derive(Debug, Clone)]
pub struct MixedBatch<'a> {
    pub records: Vec<(&'a Tensor, u32)>,
    pub targets: Targets,
}

pub fn erm_loss(
    g: &mut Graph,
    params: &ModelParameters,
    vars: &BTreeMap<String, Var>,
    batch: &MixedBatch<'_>,
    w: &LossWeights,
) -> Result<LossParts> {
    let cfg = &params.config;
    let fwd = Forward::new(cfg, vars);
    let cache = fwd.generator_cache(g)?;

    let mut per_image = Vec::with_capacity(batch.records.len());
    for (t, _) in &batch.records {
        let x = g.constant((*t).clone());
        per_image.push((x, fwd.generate_single(g, &cache, x)?));
    }
    let ids: Vec<u32> = batch.records.iter().map(|(_, d)| *d).collect();
    let dac = if w.gamma_dac == 0.0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let prompts: Vec<Var> = per_image.iter().map(|(_, p)| *p).collect();
        dac_loss(g, &prompts, &ids, w.tau, w.distance)?
    };
    let corr = corr_loss(g, vars[BANK], w.corr_norm)?;

    let mut domains = ids.clone();
    domains.sort_unstable();
    domains.dedup();
    let mut outputs = vec![None; batch.records.len()];
    for dom in domains {
        let members: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == dom).collect();
        let parts: Vec<Var> = members.iter().map(|&i| per_image[i].1).collect();
        let prompt = if parts.len() == 1 {
            parts[0]
        } else {
            g.mean_stack(&parts)?
        };
        let prepared = fwd.prepare_prompt(g, prompt)?;
        for &i in &members {
            outputs[i] = Some(fwd.guide(g, prepared, per_image[i].0)?);
        }
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every record guided")).collect();
    let stacked = g.concat_rows(&outputs)?;
    let task = task_loss(g, stacked, &batch.targets, cfg.task)?;
    let total = total_loss(g, task, corr, dac, w)?;
    Ok(LossParts {
        task,
        corr,
        dac,
        total,
    })
}

/// `λ·corr + γ·dac` over an unlabeled contrastive batch. Takes label-free
/// views, so labels cannot influence pretraining.
pub fn pretrain_loss(
    g: &mut Graph,
    params: &ModelParameters,
    vars: &BTreeMap<String, Var>,
    batch: &[UnlabeledView<'_>],
    w: &LossWeights,
) -> Result<LossParts> {
    let fwd = Forward::new(&params.config, vars);
    let cache = fwd.generator_cache(g)?;
    let mut prompts = Vec::with_capacity(batch.len());
    for view in batch {
        let x = g.constant(view.tokens.clone());
        prompts.push(fwd.generate_single(g, &cache, x)?);
    }
    let ids: Vec<u32> = batch.iter().map(|v| v.domain_id).collect();
    let dac = dac_loss(g, &prompts, &ids, w.tau, w.distance)?;
    let corr = corr_loss(g, vars[BANK], w.corr_norm)?;
    let task = g.constant(Tensor::scalar(0.0));
    let total = total_loss(g, task, corr, dac, w)?;
    Ok(LossParts {
        task,
        corr,
        dac,
        total,
    })
}

//! Per-domain evaluation under a choice of prompt source.

use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::metrics::{GroupMetrics, Metrics};
use crate::data::{Dataset, Domain, DomainPool, Label, Task};
use crate::error::{Error, Result};
use crate::model::{DomainPrompt, ModelParameters};
use crate::rng;
use crate::runtime::{adapt, infer};
use crate::tensor::Tensor;

/// Where the prompt for each evaluated domain comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSource {
    /// Generated from `k` unlabeled records of the domain.
    Generated,
    Zeros,
    Random { seed: u64 },
    /// The knowledge bank itself.
    Bank,
}

impl PromptSource {
    pub fn label(&self) -> String {
        match self {
            PromptSource::Generated => "generated".into(),
            PromptSource::Zeros => "zeros".into(),
            PromptSource::Random { .. } => "random".into(),
            PromptSource::Bank => "bank".into(),
        }
    }

    /// The prompt for one domain given its adaptation records.
    pub fn prompt_for(
        &self,
        params: &ModelParameters,
        domain_id: u32,
        adapt_records: &[&Tensor],
    ) -> Result<DomainPrompt> {
        let (z, d) = (params.config.bank_size, params.config.d);
        Ok(match self {
            PromptSource::Generated => {
                let mut p = adapt(params, adapt_records, adapt_records.len())?;
                if let crate::model::Provenance::Generated { domain_id: id, .. } = &mut p.provenance {
                    *id = Some(domain_id);
                }
                p
            }
            PromptSource::Zeros => DomainPrompt::zeros(z, d),
            PromptSource::Random { seed } => {
                DomainPrompt::random(z, d, seed.wrapping_add(domain_id as u64))
            }
            PromptSource::Bank => DomainPrompt::bank_copy(params),
        })
    }
}

/// Adaptation budget and the seed of the per-domain split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { k: 16, seed: 0 }
    }
}

/// Disjoint adaptation and evaluation indices within one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub domain_id: u32,
    pub adapt: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Draws `k` adaptation records; the rest are evaluated. A domain with at
/// most `k` records keeps one record back for evaluation.
pub fn split_domain(domain: &Domain, k: usize, seed: u64) -> Result<DomainSplit> {
    let n = domain.records.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "domain {} has {n} records; need one to adapt and one to evaluate",
            domain.id
        )));
    }
    if k == 0 {
        return Err(Error::contract("adaptation budget k must be at least 1"));
    }
    let k_eff = if k >= n {
        warn!(
            "domain {} has {n} records, fewer than k+1 = {}; adapting on {}",
            domain.id,
            k + 1,
            n - 1
        );
        n - 1
    } else {
        k
    };
    let mut r = rng::stream(seed, 3000 + domain.id as u64);
    let order = sample(&mut r, n, n).into_vec();
    let mut adapt = order[..k_eff].to_vec();
    let mut eval = order[k_eff..].to_vec();
    adapt.sort_unstable();
    eval.sort_unstable();
    Ok(DomainSplit {
        domain_id: domain.id,
        adapt,
        eval,
    })
}

/// Row-wise argmax, ties to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainOutcome {
    pub split: DomainSplit,
    pub provenance: crate::model::Provenance,
    /// Raw model outputs for `split.eval`, in order.
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub metrics: Metrics,
    pub domains: Vec<DomainOutcome>,
}

/// Scores raw outputs against record labels.
pub fn score(
    task: Task,
    domain_id: Option<u32>,
    outputs: &[Vec<f64>],
    labels: &[Label],
) -> Result<GroupMetrics> {
    match task {
        Task::Classification => {
            let truth = labels
                .iter()
                .map(|l| l.class().ok_or_else(|| Error::contract("evaluated record is unlabeled")))
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<usize> = outputs.iter().map(|o| argmax(o)).collect();
            Ok(GroupMetrics::classification(domain_id, &pred, &truth))
        }
        Task::Regression => {
            let truth = labels
                .iter()
                .map(|l| l.value().ok_or_else(|| Error::contract("evaluated record is unlabeled")))
                .collect::<Result<Vec<_>>>()?;
            let pred: Vec<f64> = outputs.iter().map(|o| o[0]).collect();
            Ok(GroupMetrics::regression(domain_id, &pred, &truth))
        }
    }
}

/// Evaluates every domain with a prompt chosen by `prompt_for`, which sees
/// the domain and its adaptation records only.
pub fn eval_with<F>(
    params: &ModelParameters,
    pool: &DomainPool,
    protocol: &EvalProtocol,
    source: String,
    mut prompt_for: F,
) -> Result<EvalReport>
where
    F: FnMut(&Domain, &[&Tensor]) -> Result<DomainPrompt>,
{
    let task = params.config.task;
    let mut per_domain = Vec::with_capacity(pool.len());
    let mut domains = Vec::with_capacity(pool.len());
    let mut all_outputs = Vec::new();
    let mut all_labels = Vec::new();
    for domain in &pool.domains {
        let split = split_domain(domain, protocol.k, protocol.seed)?;
        let adapt_records: Vec<&Tensor> =
            split.adapt.iter().map(|&i| &domain.records[i].tokens).collect();
        let prompt = prompt_for(domain, &adapt_records)?;
        let eval_records: Vec<&Tensor> =
            split.eval.iter().map(|&i| &domain.records[i].tokens).collect();
        let labels: Vec<Label> = split.eval.iter().map(|&i| domain.records[i].label).collect();
        let outputs = infer(params, &prompt, &eval_records)?;
        per_domain.push(score(task, Some(domain.id), &outputs, &labels)?);
        all_outputs.extend(outputs.iter().cloned());
        all_labels.extend(labels);
        domains.push(DomainOutcome {
            split,
            provenance: prompt.provenance.clone(),
            outputs,
        });
    }
    let overall = score(task, None, &all_outputs, &all_labels)?;
    Ok(EvalReport {
        source,
        metrics: Metrics::from_groups(overall, per_domain),
        domains,
    })
}

fn check_datasets(params: &ModelParameters, datasets: &[Dataset]) -> Result<DomainPool> {
    for ds in datasets {
        if ds.d() != params.config.d {
            return Err(Error::config(format!(
                "dataset width {} does not match model width {}",
                ds.d(),
                params.config.d
            )));
        }
        if ds.header.task != params.config.task {
            return Err(Error::config("dataset task does not match the model task"));
        }
    }
    let pool = DomainPool::from_datasets(datasets);
    if pool.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    Ok(pool)
}

/// Evaluates each domain of `datasets` separately: `k` records adapt, the
/// remaining records are predicted under the resulting prompt.
pub fn eval_model(
    params: &ModelParameters,
    datasets: &[Dataset],
    source: &PromptSource,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let pool = check_datasets(params, datasets)?;
    eval_with(params, &pool, protocol, source.label(), |dom, recs| {
        source.prompt_for(params, dom.id, recs)
    })
}

/// Evaluates every domain under one caller-supplied prompt. The split is
/// the same as for [`eval_model`], so results are comparable.
pub fn eval_given(
    params: &ModelParameters,
    datasets: &[Dataset],
    prompt: &DomainPrompt,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let pool = check_datasets(params, datasets)?;
    eval_with(params, &pool, protocol, "given".into(), |_, _| Ok(prompt.clone()))
}

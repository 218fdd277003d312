//! Deployment path and analysis suite: gradient-free adaptation,
//! inference, prompt replacement and swap studies, distance diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DomainPool};
use crate::error::{Error, Result};
use crate::model::{
    generate_prompt, guide_and_predict_batch, DomainPrompt, Forward, ModelParameters,
};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{
    eval_model, eval_with, metrics::spearman, split_domain, EvalProtocol, EvalReport,
    PromptSource,
};

fn assert_unchanged(before: &str, params: &ModelParameters, op: &str) -> Result<()> {
    let after = params.checksum();
    if before != after {
        return Err(Error::contract(format!("{op} modified the parameters")));
    }
    Ok(())
}

/// Forward-only prompt generation over the first `min(k, n)` records.
/// The parameter checksum is compared before and after.
pub fn adapt(params: &ModelParameters, records: &[&Tensor], k: usize) -> Result<DomainPrompt> {
    if records.is_empty() || k == 0 {
        return Err(Error::contract("adaptation needs at least one record"));
    }
    let before = params.checksum();
    let take = k.min(records.len());
    let prompt = generate_prompt(params, &records[..take], None)?;
    assert_unchanged(&before, params, "adapt")?;
    Ok(prompt)
}

/// Batched prediction under a fixed prompt. Checksum-asserted like `adapt`.
pub fn infer(
    params: &ModelParameters,
    prompt: &DomainPrompt,
    records: &[&Tensor],
) -> Result<Vec<Vec<f64>>> {
    let before = params.checksum();
    let out = guide_and_predict_batch(params, prompt, records)?;
    assert_unchanged(&before, params, "infer")?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub prompt: DomainPrompt,
    /// Checksum of the parameters that produced the prompt.
    pub params_checksum: String,
    pub n_records: usize,
}

/// One prompt per domain key, generated once and reused.
#[derive(Debug, Clone, Default)]
pub struct PromptCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl PromptCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn domain_key(domain_id: u32) -> String {
        format!("domain:{domain_id}")
    }

    pub fn get(&self, key: &str) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns the cached prompt, adapting on `records` only on a miss. A
    /// hit produced by different parameters is an error, not a refresh.
    pub fn get_or_adapt(
        &mut self,
        key: &str,
        params: &ModelParameters,
        records: &[&Tensor],
        k: usize,
    ) -> Result<&DomainPrompt> {
        let checksum = params.checksum();
        if let Some(e) = self.entries.get(key) {
            if e.params_checksum != checksum {
                return Err(Error::contract(format!(
                    "cached prompt `{key}` was produced by different parameters"
                )));
            }
        } else {
            let prompt = adapt(params, records, k)?;
            self.entries.insert(
                key.to_string(),
                CacheEntry {
                    prompt,
                    params_checksum: checksum,
                    n_records: k.min(records.len()),
                },
            );
        }
        Ok(&self.entries[key].prompt)
    }

    pub fn insert(&mut self, key: &str, entry: CacheEntry) -> Option<CacheEntry> {
        self.entries.insert(key.to_string(), entry)
    }
}

/// Evaluates the same splits under each prompt source; rows are sorted by
/// pooled accuracy (or negative MSE), best first.
pub fn swap_prompt_eval(
    params: &ModelParameters,
    targets: &[Dataset],
    sources: &[PromptSource],
    protocol: &EvalProtocol,
) -> Result<Vec<EvalReport>> {
    let mut rows = sources
        .iter()
        .map(|s| eval_model(params, targets, s, protocol))
        .collect::<Result<Vec<_>>>()?;
    let key = |r: &EvalReport| {
        r.metrics
            .overall
            .accuracy
            .or(r.metrics.overall.mse.map(|m| -m))
            .unwrap_or(f64::NEG_INFINITY)
    };
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
    Ok(rows)
}

fn headline(r: &EvalReport) -> f64 {
    r.metrics
        .overall
        .accuracy
        .or(r.metrics.overall.pearson)
        .unwrap_or(f64::NAN)
}

/// Domain `a`'s evaluation records under its own prompt and under `b`'s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub domain_a: u32,
    pub domain_b: u32,
    pub prompt_distance: f64,
    /// Accuracy of `a` under its own prompt minus under `b`'s.
    pub drop_a: f64,
    /// Same with the roles exchanged.
    pub drop_b: f64,
}

fn generated_prompts(
    params: &ModelParameters,
    pool: &DomainPool,
    protocol: &EvalProtocol,
) -> Result<BTreeMap<u32, DomainPrompt>> {
    let mut out = BTreeMap::new();
    for dom in &pool.domains {
        let split = split_domain(dom, protocol.k, protocol.seed)?;
        let recs: Vec<&Tensor> = split.adapt.iter().map(|&i| &dom.records[i].tokens).collect();
        out.insert(dom.id, PromptSource::Generated.prompt_for(params, dom.id, &recs)?);
    }
    Ok(out)
}

fn eval_domain_under(
    params: &ModelParameters,
    pool: &DomainPool,
    domain_id: u32,
    prompt: &DomainPrompt,
    protocol: &EvalProtocol,
) -> Result<f64> {
    let pos = pool
        .position(domain_id)
        .ok_or_else(|| Error::Lookup(format!("domain {domain_id}")))?;
    let single = DomainPool {
        domains: vec![pool.domains[pos].clone()],
    };
    let r = eval_with(params, &single, protocol, "swap".into(), |_, _| Ok(prompt.clone()))?;
    Ok(headline(&r))
}

/// Evaluates `a` under `b`'s prompt and vice versa.
pub fn cross_domain_prompt_swap(
    params: &ModelParameters,
    datasets: &[Dataset],
    domain_a: u32,
    domain_b: u32,
    protocol: &EvalProtocol,
) -> Result<SwapOutcome> {
    let pool = DomainPool::from_datasets(datasets);
    let prompts = generated_prompts(params, &pool, protocol)?;
    swap_pair(params, &pool, &prompts, domain_a, domain_b, protocol)
}

fn swap_pair(
    params: &ModelParameters,
    pool: &DomainPool,
    prompts: &BTreeMap<u32, DomainPrompt>,
    a: u32,
    b: u32,
    protocol: &EvalProtocol,
) -> Result<SwapOutcome> {
    let get = |id: u32| {
        prompts
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("no prompt for domain {id}")))
    };
    let (pa, pb) = (get(a)?, get(b)?);
    let own_a = eval_domain_under(params, pool, a, pa, protocol)?;
    let own_b = eval_domain_under(params, pool, b, pb, protocol)?;
    let a_under_b = eval_domain_under(params, pool, a, pb, protocol)?;
    let b_under_a = eval_domain_under(params, pool, b, pa, protocol)?;
    Ok(SwapOutcome {
        domain_a: a,
        domain_b: b,
        prompt_distance: pa.distance(pb),
        drop_a: own_a - a_under_b,
        drop_b: own_b - b_under_a,
    })
}

/// All unordered domain pairs and the rank correlation between prompt
/// distance and accuracy drop (each direction is one point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapStudy {
    pub pairs: Vec<SwapOutcome>,
    pub spearman: f64,
}

pub fn swap_study(
    params: &ModelParameters,
    datasets: &[Dataset],
    protocol: &EvalProtocol,
) -> Result<SwapStudy> {
    let pool = DomainPool::from_datasets(datasets);
    let prompts = generated_prompts(params, &pool, protocol)?;
    let ids: Vec<u32> = pool.domains.iter().map(|d| d.id).collect();
    let mut pairs = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            pairs.push(swap_pair(params, &pool, &prompts, a, b, protocol)?);
        }
    }
    let mut dist = Vec::new();
    let mut drop = Vec::new();
    for p in &pairs {
        dist.extend([p.prompt_distance, p.prompt_distance]);
        drop.extend([p.drop_a, p.drop_b]);
    }
    Ok(SwapStudy {
        spearman: spearman(&dist, &drop),
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceLevel {
    /// One prompt per domain; intra-domain distance compares prompts from
    /// two disjoint halves of the same domain.
    Domain,
    /// One prompt per image, averaged within domain blocks.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub level: DistanceLevel,
    pub domain_ids: Vec<u32>,
    /// Symmetric, zero diagonal. Domain-by-domain at the domain level,
    /// image-by-image at the instance level.
    pub matrix: Vec<Vec<f64>>,
    /// Block means over domain pairs; the diagonal is the intra-domain mean.
    pub blocks: Vec<Vec<f64>>,
    pub mean_intra: f64,
    pub mean_inter: f64,
    /// Instance level only, when labels exist.
    pub same_class_cross_domain: Option<f64>,
    pub cross_class_same_domain: Option<f64>,
}

/// Per-image generator outputs in one forward-only graph.
pub fn instance_prompts(params: &ModelParameters, records: &[&Tensor]) -> Result<Vec<Tensor>> {
    let before = params.checksum();
    let mut g = Graph::new();
    let vars = params.register_frozen(&mut g);
    let fwd = Forward::new(&params.config, &vars);
    let cache = fwd.generator_cache(&mut g)?;
    let mut out = Vec::with_capacity(records.len());
    for t in records {
        if t.cols() != params.config.d {
            return Err(Error::Shape {
                op: "instance_prompts",
                lhs: vec![t.rows(), params.config.d],
                rhs: t.shape().to_vec(),
            });
        }
        let x = g.constant((*t).clone());
        let p = fwd.generate_single(&mut g, &cache, x)?;
        out.push(g.value(p).clone());
    }
    assert_unchanged(&before, params, "instance_prompts")?;
    Ok(out)
}

fn block_summary(blocks: &[Vec<f64>]) -> (f64, f64) {
    let n = blocks.len();
    let intra = (0..n).map(|i| blocks[i][i]).sum::<f64>() / n as f64;
    let inter = if n > 1 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += blocks[i][j];
                }
            }
        }
        s / (n * (n - 1)) as f64
    } else {
        f64::NAN
    };
    (intra, inter)
}

/// Pairwise prompt distances (mean squared difference) at the domain or
/// instance level. `per_domain` caps the records used from each domain.
pub fn prompt_distance_matrix(
    params: &ModelParameters,
    datasets: &[Dataset],
    level: DistanceLevel,
    per_domain: usize,
    seed: u64,
) -> Result<DistanceReport> {
    let pool = DomainPool::from_datasets(datasets);
    if pool.is_empty() {
        return Err(Error::contract("no domains to compare"));
    }
    let ids: Vec<u32> = pool.domains.iter().map(|d| d.id).collect();
    let n = ids.len();
    match level {
        DistanceLevel::Domain => {
            // two disjoint halves of `per_domain` records each
            let mut halves = Vec::with_capacity(n);
            for dom in &pool.domains {
                let take = (2 * per_domain).min(dom.records.len().saturating_sub(1));
                if take < 2 {
                    return Err(Error::contract(format!(
                        "domain {} needs at least 3 records",
                        dom.id
                    )));
                }
                let split = split_domain(dom, take, seed)?;
                let recs: Vec<&Tensor> =
                    split.adapt.iter().map(|&i| &dom.records[i].tokens).collect();
                let (a, b) = recs.split_at(recs.len() / 2);
                halves.push((
                    generate_prompt(params, a, Some(dom.id))?,
                    generate_prompt(params, b, Some(dom.id))?,
                ));
            }
            let mut matrix = vec![vec![0.0; n]; n];
            let mut blocks = vec![vec![0.0; n]; n];
            for i in 0..n {
                blocks[i][i] = halves[i].0.distance(&halves[i].1);
                for j in 0..n {
                    if i != j {
                        let d = 0.25
                            * (halves[i].0.distance(&halves[j].0)
                                + halves[i].0.distance(&halves[j].1)
                                + halves[i].1.distance(&halves[j].0)
                                + halves[i].1.distance(&halves[j].1));
                        matrix[i][j] = d;
                        blocks[i][j] = d;
                    }
                }
            }
            let (mean_intra, mean_inter) = block_summary(&blocks);
            Ok(DistanceReport {
                level,
                domain_ids: ids,
                matrix,
                blocks,
                mean_intra,
                mean_inter,
                same_class_cross_domain: None,
                cross_class_same_domain: None,
            })
        }
        DistanceLevel::Instance => {
            let mut owner = Vec::new();
            let mut classes = Vec::new();
            let mut recs = Vec::new();
            for (di, dom) in pool.domains.iter().enumerate() {
                let k = per_domain.min(dom.records.len().saturating_sub(1)).max(1);
                let split = split_domain(dom, k, seed)?;
                for &i in &split.adapt {
                    owner.push(di);
                    classes.push(dom.records[i].label.class());
                    recs.push(&dom.records[i].tokens);
                }
            }
            let prompts = instance_prompts(params, &recs)?;
            let m = prompts.len();
            let mut matrix = vec![vec![0.0; m]; m];
            for i in 0..m {
                for j in i + 1..m {
                    let d = prompts[i].mean_sq_diff(&prompts[j]);
                    matrix[i][j] = d;
                    matrix[j][i] = d;
                }
            }
            let mut sums = vec![vec![0.0; n]; n];
            let mut counts = vec![vec![0usize; n]; n];
            let (mut scd, mut scd_n, mut ccsd, mut ccsd_n) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    sums[owner[i]][owner[j]] += matrix[i][j];
                    counts[owner[i]][owner[j]] += 1;
                    if let (Some(ci), Some(cj)) = (classes[i], classes[j]) {
                        if ci == cj && owner[i] != owner[j] {
                            scd += matrix[i][j];
                            scd_n += 1;
                        } else if ci != cj && owner[i] == owner[j] {
                            ccsd += matrix[i][j];
                            ccsd_n += 1;
                        }
                    }
                }
            }
            let blocks: Vec<Vec<f64>> = (0..n)
                .map(|a| {
                    (0..n)
                        .map(|b| {
                            if counts[a][b] == 0 {
                                0.0
                            } else {
                                sums[a][b] / counts[a][b] as f64
                            }
                        })
                        .collect()
                })
                .collect();
            let (mean_intra, mean_inter) = block_summary(&blocks);
            let avg = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
            Ok(DistanceReport {
                level,
                domain_ids: ids,
                matrix,
                blocks,
                mean_intra,
                mean_inter,
                same_class_cross_domain: avg(scd, scd_n),
                cross_class_same_domain: avg(ccsd, ccsd_n),
            })
        }
    }
}

/// Normalized Gram matrix of the bank rows (cosine similarities).
pub fn bank_correlation(params: &ModelParameters) -> Tensor {
    let b = params.bank();
    let (z, d) = b.dims();
    let norms: Vec<f64> = (0..z)
        .map(|i| b.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; z * z];
    for i in 0..z {
        for j in 0..z {
            out[i * z + j] = if i == j {
                1.0
            } else {
                let dot: f64 = (0..d).map(|c| b.get(i, c) * b.get(j, c)).sum();
                dot / (norms[i] * norms[j]).max(f64::MIN_POSITIVE)
            };
        }
    }
    Tensor::matrix(z, z, out).expect("square")
}

/// Largest off-diagonal magnitude of a square matrix.
pub fn max_offdiag_abs(m: &Tensor) -> f64 {
    let (r, c) = m.dims();
    let mut best = 0.0f64;
    for i in 0..r {
        for j in 0..c {
            if i != j {
                best = best.max(m.get(i, j).abs());
            }
        }
    }
    best
}

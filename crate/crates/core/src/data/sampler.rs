//! Episode and contrastive-batch sampling over a pool of source domains.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::{Dataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::rng::EngineRng;

/// All records of one domain.
#[derive(Debug, Clone)]
pub struct Domain {
    pub id: u32,
    pub records: Vec<EmbeddingRecord>,
}

/// Records grouped by domain, in ascending domain-id order.
#[derive(Debug, Clone, Default)]
pub struct DomainPool {
    pub domains: Vec<Domain>,
}

/// Identity of a record inside a [`DomainPool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordRef {
    pub domain: usize,
    pub index: usize,
}

impl DomainPool {
    pub fn from_datasets<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let mut domains: Vec<Domain> = Vec::new();
        for ds in datasets {
            for r in &ds.records {
                match domains.iter_mut().find(|d| d.id == r.domain_id) {
                    Some(d) => d.records.push(r.clone()),
                    None => domains.push(Domain {
                        id: r.domain_id,
                        records: vec![r.clone()],
                    }),
                }
            }
        }
        domains.sort_by_key(|d| d.id);
        Self { domains }
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn total_records(&self) -> usize {
        self.domains.iter().map(|d| d.records.len()).sum()
    }

    pub fn get(&self, r: RecordRef) -> &EmbeddingRecord {
        &self.domains[r.domain].records[r.index]
    }

    pub fn domain_id(&self, r: RecordRef) -> u32 {
        self.domains[r.domain].id
    }

    pub fn position(&self, domain_id: u32) -> Option<usize> {
        self.domains.iter().position(|d| d.id == domain_id)
    }
}

/// How the episode domain is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSampling {
    #[default]
    Uniform,
    SizeProportional,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub domain: usize,
    pub domain_id: u32,
    pub support: Vec<RecordRef>,
    pub query: Vec<RecordRef>,
    /// Records of the contrastive batch with their domain ids.
    pub contrastive: Vec<(RecordRef, u32)>,
}

impl Episode {
    /// Checks disjointness, a single episode domain, and (when filled) the
    /// contrastive batch's domain count.
    pub fn check(&self, pool: &DomainPool) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in self.support.iter().chain(&self.query) {
            if !seen.insert(*r) {
                return Err(Error::contract("support and query overlap"));
            }
            if pool.domain_id(*r) != self.domain_id {
                return Err(Error::contract("episode mixes domains"));
            }
        }
        Ok(())
    }

    pub fn contrastive_domain_count(&self) -> usize {
        let mut ids: Vec<u32> = self.contrastive.iter().map(|(_, d)| *d).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

pub const MIN_QUERY: usize = 8;
pub const MIN_SUPPORT: usize = 4;

/// Fits `(support, query)` into `available` records: query shrinks first
/// (down to 8), then support (down to 4).
pub fn fit_split(available: usize, n_support: usize, n_query: usize) -> Result<(usize, usize)> {
    if available >= n_support + n_query {
        return Ok((n_support, n_query));
    }
    let min_q = MIN_QUERY.min(n_query);
    if available >= n_support + min_q {
        return Ok((n_support, available - n_support));
    }
    let min_s = MIN_SUPPORT.min(n_support);
    if available >= min_s + min_q {
        return Ok((available - min_q, min_q));
    }
    Err(Error::contract(format!(
        "domain has {available} records; at least {} are needed",
        min_s + min_q
    )))
}

pub fn pick_domain(pool: &DomainPool, policy: DomainSampling, rng: &mut EngineRng) -> usize {
    match policy {
        DomainSampling::Uniform => rng.random_range(0..pool.len()),
        DomainSampling::SizeProportional => {
            let total = pool.total_records();
            let mut t = rng.random_range(0..total);
            for (i, d) in pool.domains.iter().enumerate() {
                if t < d.records.len() {
                    return i;
                }
                t -= d.records.len();
            }
            pool.len() - 1
        }
    }
}

/// Draws a source domain, then disjoint support and query sets without
/// replacement. The contrastive batch is left empty.
pub fn sample_episode(
    pool: &DomainPool,
    rng: &mut EngineRng,
    n_support: usize,
    n_query: usize,
    policy: DomainSampling,
) -> Result<Episode> {
    if pool.is_empty() {
        return Err(Error::contract("no source domains"));
    }
    let domain = pick_domain(pool, policy, rng);
    let available = pool.domains[domain].records.len();
    let (ns, nq) = fit_split(available, n_support, n_query)?;
    if (ns, nq) != (n_support, n_query) {
        warn!(
            "domain {} has {available} records; episode shrunk to support={ns} query={nq}",
            pool.domains[domain].id
        );
    }
    let picked = sample(rng, available, ns + nq).into_vec();
    let to_ref = |index| RecordRef { domain, index };
    Ok(Episode {
        domain,
        domain_id: pool.domains[domain].id,
        support: picked[..ns].iter().copied().map(to_ref).collect(),
        query: picked[ns..].iter().copied().map(to_ref).collect(),
        contrastive: Vec::new(),
    })
}

/// Fills the contrastive batch: the support set, optionally the query set,
/// and `per_domain` records from each of `num_other` distinct other domains.
pub fn build_contrastive_batch(
    pool: &DomainPool,
    mut episode: Episode,
    rng: &mut EngineRng,
    num_other: usize,
    per_domain: usize,
    include_query: bool,
) -> Episode {
    let others: Vec<usize> = (0..pool.len()).filter(|&i| i != episode.domain).collect();
    let c = if num_other > others.len() {
        warn!(
            "requested {num_other} contrastive domains but only {} other domains exist",
            others.len()
        );
        others.len()
    } else {
        num_other
    };

    let own = episode.domain_id;
    let mut batch: Vec<(RecordRef, u32)> = episode.support.iter().map(|r| (*r, own)).collect();
    if include_query {
        batch.extend(episode.query.iter().map(|r| (*r, own)));
    }
    let chosen = sample(rng, others.len(), c).into_vec();
    for pick in chosen {
        let domain = others[pick];
        let n = pool.domains[domain].records.len();
        let take = per_domain.min(n);
        let id = pool.domains[domain].id;
        for index in sample(rng, n, take) {
            batch.push((RecordRef { domain, index }, id));
        }
    }
    if pool.len() == 1 || c == 0 {
        warn!("contrastive batch holds a single domain; the contrastive loss is zero");
    }
    episode.contrastive = batch;
    episode
}

//! Synthetic multi-domain embedding benchmark with a known generative model.
//!
//! Class `c` has a latent mean `μ_c`. Domain `m` applies `x ↦ s_m·R_m·x + b_m`
//! to every latent token row `μ_c + ε`, `ε ~ N(0, σ²I)`. Because `R_m` is
//! orthogonal and the scale is uniform, the inverse transform maps each
//! domain back to the same isotropic latent Gaussian, which makes the exact
//! class posterior easy to evaluate.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::record::{Dataset, DatasetHeader, EmbeddingRecord, Label};
use crate::error::{Error, Result};
use crate::rng::{self, EngineRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub d: usize,
    pub l: usize,
    pub num_classes: usize,
    pub num_source_domains: usize,
    pub num_target_domains: usize,
    /// Extra domains emitted without labels, for unlabeled pretraining.
    pub num_unlabeled_domains: usize,
    pub samples_per_domain: usize,
    /// Pairwise distance between class means.
    pub class_separation: f64,
    pub token_noise_sigma: f64,
    /// Per-plane bound on rotation angles, radians.
    pub domain_rotation_angle_max: f64,
    pub domain_shift_sigma: f64,
    /// 0: shifts are isotropic in all `d` directions. r > 0: shifts lie in
    /// a fixed random r-dimensional subspace of the class-mean span, where
    /// they are confounded with class identity.
    pub domain_shift_rank: usize,
    pub domain_scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 16,
            l: 8,
            num_classes: 5,
            num_source_domains: 6,
            num_target_domains: 3,
            num_unlabeled_domains: 0,
            samples_per_domain: 300,
            class_separation: 2.0,
            token_noise_sigma: 1.0,
            domain_rotation_angle_max: 0.5,
            domain_shift_sigma: 2.0,
            domain_shift_rank: 2,
            domain_scale_range: [0.8, 1.25],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::config(m.to_string()));
        if self.d == 0 || self.l == 0 {
            return err("d and l must be at least 1");
        }
        if self.num_classes == 0 {
            return err("num_classes must be at least 1");
        }
        if self.num_classes > self.d {
            return err("num_classes may not exceed d (class means are orthogonal)");
        }
        if self.samples_per_domain == 0 {
            return err("samples_per_domain must be at least 1");
        }
        if self.num_source_domains < 2 {
            return err("at least two source domains are required");
        }
        if self.domain_shift_rank > self.num_classes {
            return err("domain_shift_rank cannot exceed num_classes");
        }
        if self.token_noise_sigma < 0.0 || self.domain_shift_sigma < 0.0 {
            return err("noise and shift sigmas must be non-negative");
        }
        let [lo, hi] = self.domain_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return err("domain_scale_range must satisfy 0 < lo <= hi");
        }
        if self.domain_rotation_angle_max < 0.0 {
            return err("domain_rotation_angle_max must be non-negative");
        }
        Ok(())
    }

    /// True when every domain transform is the identity.
    pub fn is_shift_free(&self) -> bool {
        self.domain_rotation_angle_max == 0.0
            && self.domain_shift_sigma == 0.0
            && self.domain_scale_range[0] == 1.0
            && self.domain_scale_range[1] == 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub domain_id: u32,
    /// Row-major `d×d` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: f64,
}

impl DomainTransform {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        let d = x.len();
        for i in 0..d {
            let rx: f64 = (0..d).map(|j| self.rotation[i * d + j] * x[j]).sum();
            out.push(self.scale * rx + self.shift[i]);
        }
    }

    /// `Rᵀ(y − b)/s`.
    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let d = y.len();
        (0..d)
            .map(|j| {
                (0..d)
                    .map(|i| self.rotation[i * d + j] * (y[i] - self.shift[i]))
                    .sum::<f64>()
                    / self.scale
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub d: usize,
    pub l: usize,
    pub token_noise_sigma: f64,
    /// `K` rows of length `d`.
    pub class_means: Vec<Vec<f64>>,
    pub domains: Vec<DomainTransform>,
}

impl GenerativeParams {
    pub fn domain(&self, id: u32) -> Result<&DomainTransform> {
        self.domains
            .iter()
            .find(|t| t.domain_id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown domain id {id}")))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub sources: Vec<Dataset>,
    pub targets: Vec<Dataset>,
    /// Label-free domains with ids after the targets.
    pub unlabeled: Vec<Dataset>,
    pub params: GenerativeParams,
}

fn random_orthogonal(d: usize, rng: &mut EngineRng) -> Vec<Vec<f64>> {
    // Gram–Schmidt on Gaussian vectors.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Composition of `⌊d/2⌋` plane rotations through random planes, each by an
/// angle drawn uniformly from `[−max_angle, max_angle]`.
fn bounded_rotation(d: usize, max_angle: f64, rng: &mut EngineRng) -> Vec<f64> {
    let mut r = vec![0.0; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    if max_angle == 0.0 || d < 2 {
        return r;
    }
    for _ in 0..d / 2 {
        let frame = random_orthogonal(d, rng);
        let (u, v) = (&frame[0], &frame[1]);
        let phi = rng.random_range(-max_angle..=max_angle);
        let (c, s) = (phi.cos(), phi.sin());
        // G = I + (c−1)(uuᵀ + vvᵀ) + s(vuᵀ − uvᵀ); R ← G·R
        let mut g = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { 1.0 } else { 0.0 };
                g[i * d + j] =
                    id + (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
        }
        let mut next = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                let gik = g[i * d + k];
                for j in 0..d {
                    next[i * d + j] += gik * r[k * d + j];
                }
            }
        }
        r = next;
    }
    r
}

fn sample_transform(
    cfg: &SyntheticConfig,
    shift_basis: &[Vec<f64>],
    domain_id: u32,
    rng: &mut EngineRng,
) -> DomainTransform {
    let rotation = bounded_rotation(cfg.d, cfg.domain_rotation_angle_max, rng);
    let shift = if shift_basis.is_empty() {
        (0..cfg.d)
            .map(|_| cfg.domain_shift_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        let mut b = vec![0.0; cfg.d];
        for u in shift_basis {
            let z = cfg.domain_shift_sigma * rng.sample::<f64, _>(StandardNormal);
            for (x, ui) in b.iter_mut().zip(u) {
                *x += z * ui;
            }
        }
        b
    };
    let [lo, hi] = cfg.domain_scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    DomainTransform {
        domain_id,
        rotation,
        shift,
        scale,
    }
}

fn sample_domain(
    cfg: &SyntheticConfig,
    params: &GenerativeParams,
    transform: &DomainTransform,
    rng: &mut EngineRng,
) -> Result<Dataset> {
    let noise = Normal::new(0.0, cfg.token_noise_sigma.max(0.0))
        .map_err(|e| Error::config(e.to_string()))?;
    let mut records = Vec::with_capacity(cfg.samples_per_domain);
    let mut latent = vec![0.0; cfg.d];
    for i in 0..cfg.samples_per_domain {
        let class = i % cfg.num_classes;
        let mut data = Vec::with_capacity(cfg.l * cfg.d);
        for _ in 0..cfg.l {
            for (x, mu) in latent.iter_mut().zip(&params.class_means[class]) {
                let eps = if cfg.token_noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                *x = mu + eps;
            }
            transform.apply(&latent, &mut data);
        }
        records.push(EmbeddingRecord::new(
            transform.domain_id,
            Label::Class(class),
            Tensor::matrix(cfg.l, cfg.d, data)?,
        ));
    }
    Dataset::new(
        DatasetHeader::classification(cfg.d, cfg.l, cfg.num_classes),
        records,
    )
}

/// Generates one dataset per source domain (ids `0..N`) and per target
/// domain (ids `N..N+M`).
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, 0);

    let frame = random_orthogonal(cfg.d, &mut rng);
    let radius = cfg.class_separation / std::f64::consts::SQRT_2;
    let class_means = frame
        .iter()
        .take(cfg.num_classes)
        .map(|row| row.iter().map(|x| radius * x).collect())
        .collect();

    // orthonormal r×K mixing of the class-mean directions
    let shift_basis: Vec<Vec<f64>> = if cfg.domain_shift_rank == 0 {
        Vec::new()
    } else {
        let mut r = rng::stream(cfg.seed, 1);
        let mix = random_orthogonal(cfg.num_classes, &mut r);
        mix.iter()
            .take(cfg.domain_shift_rank)
            .map(|w| {
                (0..cfg.d)
                    .map(|i| (0..cfg.num_classes).map(|k| w[k] * frame[k][i]).sum())
                    .collect()
            })
            .collect()
    };

    let total = cfg.num_source_domains + cfg.num_target_domains + cfg.num_unlabeled_domains;
    let domains = (0..total as u32)
        .map(|id| {
            let mut r = rng::stream(cfg.seed, 1000 + id as u64);
            sample_transform(cfg, &shift_basis, id, &mut r)
        })
        .collect();
    let params = GenerativeParams {
        d: cfg.d,
        l: cfg.l,
        token_noise_sigma: cfg.token_noise_sigma,
        class_means,
        domains,
    };

    let mut sources = Vec::with_capacity(cfg.num_source_domains);
    let mut targets = Vec::with_capacity(cfg.num_target_domains);
    let mut unlabeled = Vec::with_capacity(cfg.num_unlabeled_domains);
    let first_unlabeled = cfg.num_source_domains + cfg.num_target_domains;
    for t in &params.domains {
        let mut r = rng::stream(cfg.seed, 2000 + t.domain_id as u64);
        let mut ds = sample_domain(cfg, &params, t, &mut r)?;
        let id = t.domain_id as usize;
        if id < cfg.num_source_domains {
            sources.push(ds);
        } else if id < first_unlabeled {
            targets.push(ds);
        } else {
            for rec in &mut ds.records {
                rec.label = Label::Unlabeled;
            }
            unlabeled.push(ds);
        }
    }
    Ok(SyntheticBenchmark {
        sources,
        targets,
        unlabeled,
        params,
    })
}

/// Exact posterior argmax under the known generative model. Ties go to the
/// lower class index.
pub fn bayes_oracle(params: &GenerativeParams, record: &EmbeddingRecord) -> Result<usize> {
    let t = params.domain(record.domain_id)?;
    let (l, d) = record.tokens.dims();
    if d != params.d {
        return Err(Error::Shape {
            op: "bayes_oracle",
            lhs: vec![l, params.d],
            rhs: vec![l, d],
        });
    }
    let latent: Vec<Vec<f64>> = (0..l).map(|i| t.invert(record.tokens.row(i))).collect();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, mu) in params.class_means.iter().enumerate() {
        let score = -latent
            .iter()
            .map(|x| x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>();
        if score > best_score {
            best_score = score;
            best = c;
        }
    }
    Ok(best)
}

/// Fraction of labeled records the oracle classifies correctly.
pub fn oracle_accuracy(params: &GenerativeParams, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in &ds.records {
        if let Label::Class(c) = r.label {
            total += 1;
            if bayes_oracle(params, r)? == c {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

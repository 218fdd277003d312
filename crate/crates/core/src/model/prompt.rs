use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::forward::Forward;
use super::params::ModelParameters;
use crate::data::checksum4;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Generated {
        domain_id: Option<u32>,
        n_condition_images: usize,
    },
    Zeros,
    Random {
        seed: u64,
    },
    BankCopy,
}

/// A `Z×d` domain prompt and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPrompt {
    pub matrix: Tensor,
    pub provenance: Provenance,
}

impl DomainPrompt {
    pub fn zeros(z: usize, d: usize) -> Self {
        Self {
            matrix: Tensor::zeros(z, d),
            provenance: Provenance::Zeros,
        }
    }

    /// Entries ~ N(0, 1/d), the scale of a freshly initialized bank.
    pub fn random(z: usize, d: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 11);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid sigma");
        let data = (0..z * d).map(|_| normal.sample(&mut r)).collect();
        Self {
            matrix: Tensor::matrix(z, d, data).expect("shape"),
            provenance: Provenance::Random { seed },
        }
    }

    pub fn bank_copy(params: &ModelParameters) -> Self {
        Self {
            matrix: params.bank().clone(),
            provenance: Provenance::BankCopy,
        }
    }

    /// Mean squared elementwise difference.
    pub fn distance(&self, other: &DomainPrompt) -> f64 {
        self.matrix.mean_sq_diff(&other.matrix)
    }
}

fn check_tokens(params: &ModelParameters, tokens: &Tensor) -> Result<()> {
    if tokens.cols() != params.config.d {
        return Err(Error::Shape {
            op: "prompt generation",
            lhs: vec![tokens.rows(), params.config.d],
            rhs: tokens.shape().to_vec(),
        });
    }
    Ok(())
}

/// Average of the generator outputs over a conditioning batch.
pub fn generate_prompt(
    params: &ModelParameters,
    condition: &[&Tensor],
    domain_id: Option<u32>,
) -> Result<DomainPrompt> {
    if condition.is_empty() {
        return Err(Error::contract("prompt generation needs at least one image"));
    }
    for t in condition {
        check_tokens(params, t)?;
    }
    let mut g = Graph::new();
    let vars = params.register_frozen(&mut g);
    let fwd = Forward::new(&params.config, &vars);
    let cache = fwd.generator_cache(&mut g)?;
    let images: Vec<_> = condition.iter().map(|t| g.constant((*t).clone())).collect();
    let p = fwd.generate_pooled(&mut g, &cache, &images)?;
    Ok(DomainPrompt {
        matrix: g.value(p).clone(),
        provenance: Provenance::Generated {
            domain_id,
            n_condition_images: condition.len(),
        },
    })
}

pub fn generate_prompt_single(params: &ModelParameters, tokens: &Tensor) -> Result<DomainPrompt> {
    generate_prompt(params, &[tokens], None)
}

/// Predictions for a batch of images under one prompt; one row per image
/// (`num_classes` logits, or a single regression value).
pub fn guide_and_predict_batch(
    params: &ModelParameters,
    prompt: &DomainPrompt,
    images: &[&Tensor],
) -> Result<Vec<Vec<f64>>> {
    let cfg = &params.config;
    if prompt.matrix.dims() != (cfg.bank_size, cfg.d) {
        return Err(Error::Shape {
            op: "guide_and_predict",
            lhs: vec![cfg.bank_size, cfg.d],
            rhs: prompt.matrix.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let vars = params.register_frozen(&mut g);
    let fwd = Forward::new(cfg, &vars);
    let p = g.constant(prompt.matrix.clone());
    let prepared = fwd.prepare_prompt(&mut g, p)?;
    let mut out = Vec::with_capacity(images.len());
    for t in images {
        check_tokens(params, t)?;
        let x = g.constant((*t).clone());
        let y = fwd.guide(&mut g, prepared, x)?;
        out.push(g.value(y).data().to_vec());
    }
    Ok(out)
}

pub fn guide_and_predict(
    params: &ModelParameters,
    prompt: &DomainPrompt,
    tokens: &Tensor,
) -> Result<Vec<f64>> {
    Ok(guide_and_predict_batch(params, prompt, &[tokens])?.remove(0))
}

const PROMPT_MAGIC: &[u8; 4] = b"VDPP";
const PROMPT_VERSION: u16 = 1;

/// Portable prompt file:
/// `[magic "VDPP"][version u16][Z u32][d u32][provenance len u32][provenance JSON]`
/// `[Z·d f64][checksum 4 bytes]`, little-endian. The checksum covers
/// everything before it.
pub fn encode_prompt(prompt: &DomainPrompt) -> Result<Vec<u8>> {
    let (z, d) = prompt.matrix.dims();
    let prov = serde_json::to_vec(&prompt.provenance)
        .map_err(|e| Error::contract(format!("provenance encoding: {e}")))?;
    let mut out = Vec::with_capacity(18 + prov.len() + z * d * 8 + 4);
    out.extend_from_slice(PROMPT_MAGIC);
    out.extend_from_slice(&PROMPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(z as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    out.extend_from_slice(&prov);
    for v in prompt.matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum4(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn decode_prompt(bytes: &[u8]) -> Result<DomainPrompt> {
    let need = |n: usize, at: usize| {
        if bytes.len() < at + n {
            Err(Error::format(at as u64, "truncated prompt file"))
        } else {
            Ok(())
        }
    };
    need(18, 0)?;
    if &bytes[..4] != PROMPT_MAGIC {
        return Err(Error::format(0, "bad prompt magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PROMPT_VERSION {
        return Err(Error::format(4, format!("unsupported prompt version {version}")));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (z, d, plen) = (u32_at(6), u32_at(10), u32_at(14));
    let body = 18 + plen + z * d * 8;
    need(plen + z * d * 8 + 4, 18)?;
    if bytes.len() != body + 4 {
        return Err(Error::format(body as u64 + 4, "trailing bytes after prompt"));
    }
    if bytes[body..] != checksum4(&bytes[..body]) {
        return Err(Error::format(body as u64, "prompt checksum mismatch"));
    }
    let provenance = serde_json::from_slice(&bytes[18..18 + plen])
        .map_err(|e| Error::format(18, format!("provenance: {e}")))?;
    let data = bytes[18 + plen..body]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DomainPrompt {
        matrix: Tensor::matrix(z, d, data)?,
        provenance,
    })
}

pub fn export_prompt(prompt: &DomainPrompt, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_prompt(prompt)?).map_err(|e| Error::io(path, e))
}

pub fn import_prompt(path: impl AsRef<Path>) -> Result<DomainPrompt> {
    let path = path.as_ref();
    decode_prompt(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

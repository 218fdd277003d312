use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{BlockOptions, ModelConfig};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

pub const BANK: &str = "bank";
pub const CLS: &str = "cls";

/// Every trainable tensor of the model, keyed by dotted name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub tensors: ParamSet,
}

/// Parameter shape table for a config, in name order.
pub fn parameter_shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let d = cfg.d;
    let hidden = cfg.ffn_mult * d;
    let mut shapes = BTreeMap::new();
    let mut add = |name: String, r: usize, c: usize| {
        shapes.insert(name, (r, c));
    };

    add(BANK.into(), cfg.bank_size, d);
    add(CLS.into(), 1, d);

    let attn = |add: &mut dyn FnMut(String, usize, usize), p: &str| {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            add(format!("{p}.{w}"), d, d);
        }
    };
    let norm = |add: &mut dyn FnMut(String, usize, usize), p: &str, opts: BlockOptions| {
        if opts.layer_norm {
            add(format!("{p}.gain"), 1, d);
            add(format!("{p}.bias"), 1, d);
        }
    };
    let ffn = |add: &mut dyn FnMut(String, usize, usize), p: &str, opts: BlockOptions| {
        if opts.feed_forward {
            add(format!("{p}.w1"), d, hidden);
            add(format!("{p}.b1"), 1, hidden);
            add(format!("{p}.w2"), hidden, d);
            add(format!("{p}.b2"), 1, d);
        }
    };

    let g = cfg.generator;
    for i in 0..cfg.generator_blocks {
        let p = format!("gen.{i}");
        attn(&mut add, &format!("{p}.attn"));
        norm(&mut add, &format!("{p}.norm_q"), g);
        norm(&mut add, &format!("{p}.norm_kv"), g);
        if g.feed_forward {
            norm(&mut add, &format!("{p}.norm_ffn"), g);
        }
        ffn(&mut add, &format!("{p}.ffn"), g);
    }

    let m = cfg.guidance;
    for i in 0..cfg.guidance_blocks {
        let p = format!("gm.{i}");
        attn(&mut add, &format!("{p}.self_attn"));
        attn(&mut add, &format!("{p}.t2i"));
        attn(&mut add, &format!("{p}.i2t"));
        norm(&mut add, &format!("{p}.norm_self"), m);
        norm(&mut add, &format!("{p}.norm_t2i"), m);
        norm(&mut add, &format!("{p}.norm_img"), m);
        norm(&mut add, &format!("{p}.norm_i2t"), m);
        if m.feed_forward {
            norm(&mut add, &format!("{p}.norm_ffn"), m);
        }
        ffn(&mut add, &format!("{p}.ffn"), m);
    }
    norm(&mut add, "gm.final_norm", m);

    let k = cfg.num_outputs();
    add("head.w1".into(), d, d);
    add("head.b1".into(), 1, d);
    add("head.w2".into(), d, k);
    add("head.b2".into(), 1, k);
    shapes
}

impl ModelParameters {
    /// Bank and CLS rows ~ N(0, 1/d); weight matrices ~ U(±1/√fan_in);
    /// biases 0; norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, 7);
        let gauss = Normal::new(0.0, 1.0 / (config.d as f64).sqrt()).expect("valid sigma");
        let mut tensors = ParamSet::new();
        for (name, (rows, cols)) in parameter_shapes(config) {
            let leaf = name.rsplit('.').next().unwrap();
            let data: Vec<f64> = if name == BANK || name == CLS {
                (0..rows * cols).map(|_| gauss.sample(&mut r)).collect()
            } else if leaf == "gain" {
                vec![1.0; rows * cols]
            } else if leaf == "bias" || leaf.starts_with('b') {
                vec![0.0; rows * cols]
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                (0..rows * cols)
                    .map(|_| r.random_range(-bound..bound))
                    .collect()
            };
            tensors.insert(name, Tensor::matrix(rows, cols, data)?);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn bank(&self) -> &Tensor {
        self.get(BANK)
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names of the generator and bank parameters.
    pub fn generator_names(&self) -> impl Iterator<Item = &String> {
        self.tensors
            .keys()
            .filter(|k| k.as_str() == BANK || k.starts_with("gen."))
    }

    /// Names of everything downstream of the prompt: guidance, CLS and head.
    pub fn guidance_names(&self) -> impl Iterator<Item = &String> {
        self.tensors
            .keys()
            .filter(|k| k.as_str() == CLS || k.starts_with("gm.") || k.starts_with("head."))
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect()
    }

    /// Adds every tensor to `g` as a constant, for forward-only use.
    pub fn register_frozen(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

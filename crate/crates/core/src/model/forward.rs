//! Forward passes of the prompt generator, guidance module and head,
//! expressed on a [`Graph`] so the same code serves training and inference.

use std::collections::BTreeMap;

use super::config::{BlockOptions, ModelConfig};
use super::params::{BANK, CLS};
use crate::error::Result;
use crate::tensor::{Graph, Var};

const LN_EPS: f64 = 1e-5;

/// Model parameters bound to graph nodes.
pub struct Forward<'a> {
    pub cfg: &'a ModelConfig,
    pub vars: &'a BTreeMap<String, Var>,
}

/// Per-head query projections of the bank for the first generator block.
/// They do not depend on the conditioning image, so one graph computes them
/// once and reuses them for every image.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    bank: Var,
    first_query: Var,
}

/// The prompt stream `[P; CLS]` after the first guidance block's
/// self-attention, which is shared by every image guided by the same prompt.
#[derive(Debug, Clone, Copy)]
pub struct PreparedPrompt {
    tokens: Var,
    self_attended: bool,
}

impl<'a> Forward<'a> {
    pub fn new(cfg: &'a ModelConfig, vars: &'a BTreeMap<String, Var>) -> Self {
        Self { cfg, vars }
    }

    fn v(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let normed = g.layer_norm_rows(x, LN_EPS)?;
        let scaled = g.mul(normed, self.v(&format!("{prefix}.gain")))?;
        g.add(scaled, self.v(&format!("{prefix}.bias")))
    }

    fn maybe_norm(&self, g: &mut Graph, x: Var, prefix: &str, opts: BlockOptions) -> Result<Var> {
        if opts.layer_norm {
            self.layer_norm(g, x, prefix)
        } else {
            Ok(x)
        }
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let h = g.matmul(x, self.v(&format!("{prefix}.w1")))?;
        let h = g.add(h, self.v(&format!("{prefix}.b1")))?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, self.v(&format!("{prefix}.w2")))?;
        g.add(o, self.v(&format!("{prefix}.b2")))
    }

    fn query(&self, g: &mut Graph, q_in: Var, prefix: &str) -> Result<Var> {
        g.matmul(q_in, self.v(&format!("{prefix}.w_q")))
    }

    /// Multi-head attention: `softmax(Q_h K_hᵀ/√(d/heads)) V_h` per head,
    /// concatenated and projected by `W_O`. `q` is already projected.
    fn attention(&self, g: &mut Graph, prefix: &str, q: Var, kv_in: Var) -> Result<Var> {
        let k = g.matmul(kv_in, self.v(&format!("{prefix}.w_k")))?;
        let v = g.matmul(kv_in, self.v(&format!("{prefix}.w_v")))?;
        let cat = g.attention(q, k, v, self.cfg.num_heads)?;
        g.matmul(cat, self.v(&format!("{prefix}.w_o")))
    }

    fn residual(g: &mut Graph, opts: BlockOptions, x: Var, delta: Var) -> Result<Var> {
        if opts.residual {
            g.add(x, delta)
        } else {
            Ok(delta)
        }
    }

    pub fn generator_cache(&self, g: &mut Graph) -> Result<GeneratorCache> {
        let bank = self.v(BANK);
        let qn = self.maybe_norm(g, bank, "gen.0.norm_q", self.cfg.generator)?;
        let first_query = self.query(g, qn, "gen.0.attn")?;
        Ok(GeneratorCache { bank, first_query })
    }

    /// Runs the generator stack for one image: bank rows query the image's
    /// token embeddings. Returns `Z×d`.
    pub fn generate_single(&self, g: &mut Graph, cache: &GeneratorCache, tokens: Var) -> Result<Var> {
        let opts = self.cfg.generator;
        let mut q = cache.bank;
        for i in 0..self.cfg.generator_blocks {
            let p = format!("gen.{i}");
            let qp = if i == 0 {
                cache.first_query
            } else {
                let qn = self.maybe_norm(g, q, &format!("{p}.norm_q"), opts)?;
                self.query(g, qn, &format!("{p}.attn"))?
            };
            let kvn = self.maybe_norm(g, tokens, &format!("{p}.norm_kv"), opts)?;
            let a = self.attention(g, &format!("{p}.attn"), qp, kvn)?;
            q = Self::residual(g, opts, q, a)?;
            if opts.feed_forward {
                let x = self.maybe_norm(g, q, &format!("{p}.norm_ffn"), opts)?;
                let f = self.feed_forward(g, x, &format!("{p}.ffn"))?;
                q = Self::residual(g, opts, q, f)?;
            }
        }
        Ok(q)
    }

    /// Average of the per-image generator outputs over the batch.
    pub fn generate_pooled(&self, g: &mut Graph, cache: &GeneratorCache, images: &[Var]) -> Result<Var> {
        let outs = images
            .iter()
            .map(|&t| self.generate_single(g, cache, t))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.mean_stack(&outs)
    }

    /// Appends the CLS token to `prompt` and applies the first guidance
    /// block's self-attention.
    pub fn prepare_prompt(&self, g: &mut Graph, prompt: Var) -> Result<PreparedPrompt> {
        let tokens = g.concat_rows(&[prompt, self.v(CLS)])?;
        if self.cfg.guidance_blocks == 0 {
            return Ok(PreparedPrompt {
                tokens,
                self_attended: false,
            });
        }
        let tokens = self.self_attention(g, tokens, "gm.0")?;
        Ok(PreparedPrompt {
            tokens,
            self_attended: true,
        })
    }

    fn self_attention(&self, g: &mut Graph, t: Var, p: &str) -> Result<Var> {
        let opts = self.cfg.guidance;
        let tn = self.maybe_norm(g, t, &format!("{p}.norm_self"), opts)?;
        let qp = self.query(g, tn, &format!("{p}.self_attn"))?;
        let a = self.attention(g, &format!("{p}.self_attn"), qp, tn)?;
        Self::residual(g, opts, t, a)
    }

    /// Two-way guidance of one image by a prepared prompt, then the head.
    /// Returns `1×outputs`.
    pub fn guide(&self, g: &mut Graph, prepared: PreparedPrompt, image: Var) -> Result<Var> {
        let opts = self.cfg.guidance;
        let blocks = self.cfg.guidance_blocks;
        let mut t = prepared.tokens;
        let mut img = image;
        for i in 0..blocks {
            let p = format!("gm.{i}");
            if i > 0 || !prepared.self_attended {
                t = self.self_attention(g, t, &p)?;
            }
            // prompt tokens attend to the image
            let tn = self.maybe_norm(g, t, &format!("{p}.norm_t2i"), opts)?;
            let imgn = self.maybe_norm(g, img, &format!("{p}.norm_img"), opts)?;
            let qp = self.query(g, tn, &format!("{p}.t2i"))?;
            let a = self.attention(g, &format!("{p}.t2i"), qp, imgn)?;
            t = Self::residual(g, opts, t, a)?;

            if opts.feed_forward {
                let x = self.maybe_norm(g, t, &format!("{p}.norm_ffn"), opts)?;
                let f = self.feed_forward(g, x, &format!("{p}.ffn"))?;
                t = Self::residual(g, opts, t, f)?;
            }

            // The image update of the last block cannot reach the CLS output.
            if i + 1 < blocks {
                let tn = self.maybe_norm(g, t, &format!("{p}.norm_i2t"), opts)?;
                let qp = self.query(g, imgn, &format!("{p}.i2t"))?;
                let a = self.attention(g, &format!("{p}.i2t"), qp, tn)?;
                img = Self::residual(g, opts, img, a)?;
            }
        }
        let z = g.value(t).rows() - 1;
        let cls = g.slice_rows(t, z, 1)?;
        let cls = self.maybe_norm(g, cls, "gm.final_norm", opts)?;
        self.head(g, cls)
    }

    fn head(&self, g: &mut Graph, cls: Var) -> Result<Var> {
        let h = g.matmul(cls, self.v("head.w1"))?;
        let h = g.add(h, self.v("head.b1"))?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, self.v("head.w2"))?;
        g.add(o, self.v("head.b2"))
    }
}

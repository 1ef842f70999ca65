//! Desk-scale models: a pre-norm decoder-only transformer and a token MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GraphBuilder, TokenSource};
use crate::data::Batch;
use crate::error::{Result, WinqError};
use crate::quant::QuantConfig;
use crate::tensor::{ParamKind, ParamLayout, ParamVector};

pub const INIT_STD: f64 = 0.02;
const FF_MULT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    TinyTransformer,
    /// Next-token MLP on the current token: embedding, `layers` hidden
    /// blocks of width `d_model`, and a biased output head.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub layers: usize,
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub vocab: usize,
    #[serde(default = "default_context")]
    pub context: usize,
}

fn default_heads() -> usize {
    1
}

fn default_context() -> usize {
    64
}

impl ModelConfig {
    pub fn tiny_transformer(layers: usize, d_model: usize, heads: usize, vocab: usize, context: usize) -> Self {
        Self { family: ModelFamily::TinyTransformer, layers, d_model, heads, vocab, context }
    }

    pub fn mlp(layers: usize, d_model: usize, vocab: usize, context: usize) -> Self {
        Self { family: ModelFamily::Mlp, layers, d_model, heads: 1, vocab, context }
    }

    pub fn d_ff(&self) -> usize {
        FF_MULT * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(WinqError::Config(msg));
        if self.d_model == 0 || !self.d_model.is_power_of_two() {
            return bad(format!("d_model {} must be a power of two", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.vocab < 2 || self.vocab > u16::MAX as usize {
            return bad(format!("vocab {} must be in 2..=65535", self.vocab));
        }
        if self.context == 0 {
            return bad("context length must be positive".into());
        }
        if self.family == ModelFamily::TinyTransformer && self.layers == 0 {
            return bad("a transformer needs at least one layer".into());
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, t, l, f) = (self.vocab, self.d_model, self.context, self.layers, self.d_ff());
        match self.family {
            ModelFamily::TinyTransformer => v * d + t * d + l * (4 * d * d + 2 * d * f + f + d + 4 * d) + 2 * d + v * d,
            ModelFamily::Mlp => v * d + l * (d * d + d) + v * d + v,
        }
    }

    /// Parameter layout in graph order.
    pub fn layout(&self) -> Result<ParamLayout> {
        self.validate()?;
        let (v, d, f) = (self.vocab, self.d_model, self.d_ff());
        let mut p = ParamLayout::new();
        p.push("tok_emb", vec![v, d], ParamKind::Embedding)?;
        match self.family {
            ModelFamily::TinyTransformer => {
                p.push("pos_emb", vec![self.context, d], ParamKind::Embedding)?;
                for l in 0..self.layers {
                    let n = |s: &str| format!("layers.{l}.{s}");
                    p.push(&n("ln1.gain"), vec![d], ParamKind::NormGain)?;
                    p.push(&n("ln1.bias"), vec![d], ParamKind::NormBias)?;
                    for w in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                        p.push(&n(&format!("{w}.weight")), vec![d, d], ParamKind::Weight)?;
                    }
                    p.push(&n("ln2.gain"), vec![d], ParamKind::NormGain)?;
                    p.push(&n("ln2.bias"), vec![d], ParamKind::NormBias)?;
                    p.push(&n("ffn.up.weight"), vec![f, d], ParamKind::Weight)?;
                    p.push(&n("ffn.up.bias"), vec![f], ParamKind::Bias)?;
                    p.push(&n("ffn.down.weight"), vec![d, f], ParamKind::Weight)?;
                    p.push(&n("ffn.down.bias"), vec![d], ParamKind::Bias)?;
                }
                p.push("ln_f.gain", vec![d], ParamKind::NormGain)?;
                p.push("ln_f.bias", vec![d], ParamKind::NormBias)?;
                p.push("head.weight", vec![v, d], ParamKind::Dense)?;
            }
            ModelFamily::Mlp => {
                for l in 0..self.layers {
                    p.push(&format!("layers.{l}.fc.weight"), vec![d, d], ParamKind::Weight)?;
                    p.push(&format!("layers.{l}.fc.bias"), vec![d], ParamKind::Bias)?;
                }
                p.push("head.weight", vec![v, d], ParamKind::Dense)?;
                p.push("head.bias", vec![v], ParamKind::Bias)?;
            }
        }
        Ok(p)
    }

    /// Mean next-token cross-entropy graph over `layout`.
    pub fn graph(&self, layout: &ParamLayout) -> Result<Graph> {
        let mut g = GraphBuilder::new(layout);
        let tok = g.param("tok_emb")?;
        let mut x = g.embed(tok, TokenSource::Inputs)?;
        match self.family {
            ModelFamily::TinyTransformer => {
                let pos = g.param("pos_emb")?;
                let pe = g.embed(pos, TokenSource::Positions)?;
                x = g.add(x, pe)?;
                for l in 0..self.layers {
                    let n = |s: &str| format!("layers.{l}.{s}");
                    let h = norm(&mut g, x, &n("ln1"))?;
                    let q = g.linear(h, &n("attn.q.weight"), None)?;
                    let k = g.linear(h, &n("attn.k.weight"), None)?;
                    let v = g.linear(h, &n("attn.v.weight"), None)?;
                    let a = g.causal_attention(q, k, v, self.heads)?;
                    let o = g.linear(a, &n("attn.o.weight"), None)?;
                    x = g.add(x, o)?;
                    let h = norm(&mut g, x, &n("ln2"))?;
                    let up = g.linear(h, &n("ffn.up.weight"), Some(&n("ffn.up.bias")))?;
                    let act = g.gelu(up)?;
                    let down = g.linear(act, &n("ffn.down.weight"), Some(&n("ffn.down.bias")))?;
                    x = g.add(x, down)?;
                }
                x = norm(&mut g, x, "ln_f")?;
                let logits = g.linear(x, "head.weight", None)?;
                let loss = g.cross_entropy(logits)?;
                g.finish(loss)
            }
            ModelFamily::Mlp => {
                for l in 0..self.layers {
                    let h = g.linear(x, &format!("layers.{l}.fc.weight"), Some(&format!("layers.{l}.fc.bias")))?;
                    x = g.gelu(h)?;
                }
                let logits = g.linear(x, "head.weight", Some("head.bias"))?;
                let loss = g.cross_entropy(logits)?;
                g.finish(loss)
            }
        }
    }
}

fn norm(g: &mut GraphBuilder<'_>, x: usize, prefix: &str) -> Result<usize> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Graph and freshly initialized parameters: N(0, 0.02²) for weight
/// matrices and embeddings, zero biases and norm offsets, unit norm gains.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Graph, ParamVector)> {
    let layout = config.layout()?;
    let graph = config.graph(&layout)?;
    let mut params = ParamVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for e in layout.entries() {
        let s = params.slice_mut(&e.name).expect("layout entry");
        match e.kind {
            ParamKind::Weight | ParamKind::Embedding | ParamKind::Dense => {
                for x in s.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
            ParamKind::NormGain => s.fill(1.0),
            ParamKind::Bias | ParamKind::NormBias | ParamKind::Step => {}
        }
    }
    Ok((graph, params))
}

/// Mean next-token cross-entropy with weights and activations quantized per
/// `quant`.
pub fn batch_loss(graph: &Graph, params: &ParamVector, batch: &Batch, quant: &QuantConfig) -> Result<f64> {
    graph.loss(params, batch, quant)
}

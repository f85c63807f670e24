//! Decoder-only causal transformer over latent vectors.

use rand::{Rng, RngCore};

use crate::compressor::Conv;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), 1, width, 1.0),
            beta: store.add_zeros(format!("{name}.beta"), 1, width),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// One pre-norm block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub qkv: Conv,
    pub proj: Conv,
    pub ln_ff: LayerNorm,
    pub ff_in: Conv,
    pub ff_out: Conv,
}

/// Inverted dropout applied to residual branches during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = g.value(x).data().len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.dropout(x, mask)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transformer {
    pub blocks: Vec<Block>,
    /// Learned position embeddings, one row per input position.
    pub positions: ParamId,
    pub ln_out: LayerNorm,
    pub out: Conv,
    pub heads: usize,
}

impl Transformer {
    pub fn init(
        store: &mut ParamStore,
        layers: usize,
        heads: usize,
        width: usize,
        ff_width: usize,
        max_positions: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let residual_gain = 1.0 / (2.0 * layers.max(1) as f64).sqrt();
        let blocks = (0..layers)
            .map(|l| Block {
                ln_attn: LayerNorm::init(store, &format!("tf{l}.ln_attn"), width),
                qkv: Conv::init(store, &format!("tf{l}.qkv"), width, 3 * width, 1.0, rng),
                proj: Conv::init(store, &format!("tf{l}.proj"), width, width, residual_gain, rng),
                ln_ff: LayerNorm::init(store, &format!("tf{l}.ln_ff"), width),
                ff_in: Conv::init(store, &format!("tf{l}.ff_in"), width, ff_width, 1.0, rng),
                ff_out: Conv::init(store, &format!("tf{l}.ff_out"), ff_width, width, residual_gain, rng),
            })
            .collect();
        let positions = store.add_normal("tf.positions", max_positions, width, 0.02, rng);
        let ln_out = LayerNorm::init(store, "tf.ln_out", width);
        let out = Conv::init(store, "tf.out", width, width, 1.0, rng);
        Self {
            blocks,
            positions,
            ln_out,
            out,
            heads,
        }
    }

    pub fn max_positions(&self, store: &ParamStore) -> usize {
        store.get(self.positions).rows()
    }

    /// Maps `n` input rows to `n` context rows; row `t` sees rows `0..=t` only.
    pub fn forward(&self, g: &mut Graph, x: Var, mut dropout: Option<&mut Dropout>) -> Result<Var> {
        let n = g.shape(x).0;
        let max = self.max_positions(g.params());
        if n > max {
            return Err(Error::TooLong { latents: n, max });
        }
        let table = g.param(self.positions);
        let pos = g.gather_rows(table, &(0..n).collect::<Vec<_>>());
        let mut h = g.add(x, pos);
        for b in &self.blocks {
            let a = b.ln_attn.apply(g, h);
            let qkv = b.qkv.apply(g, a);
            let att = g.causal_attention(qkv, self.heads);
            let mut att = b.proj.apply(g, att);
            if let Some(d) = dropout.as_deref_mut() {
                att = d.apply(g, att);
            }
            h = g.add(h, att);
            let f = b.ln_ff.apply(g, h);
            let f = b.ff_in.apply(g, f);
            let f = g.gelu(f);
            let mut f = b.ff_out.apply(g, f);
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(g, f);
            }
            h = g.add(h, f);
        }
        let h = self.ln_out.apply(g, h);
        Ok(self.out.apply(g, h))
    }
}

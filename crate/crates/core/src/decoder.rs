//! Expands transformer context vectors back into per-token logits.
//!
//! For a group at depth `l` with scheme `a/b` the context vector is first
//! upsampled into `b` ancestor slots, then, for each of the `a` tiers below,
//! every MIXED slot is expanded into eight child slots. Dependencies among the
//! tokens of one group are restored in two ways:
//!
//! * a masked block convolution inside each sibling block adds
//!   `sum_{k<j} A[j][k] e(token_k)` to slot `j`;
//! * for `a >= 1`, a finished child block is summarised by the encoder's
//!   sibling convolution, lifted to its parent, mixed into later sibling
//!   parents by the parent tier's block convolution and carried back down by
//!   the transposed convolution. Parents without children contribute nothing.
//!
//! Slot `j` never reads a token at or after `j`, so logits for a token depend
//! only on tokens that precede it in breadth-first order.

use rand::Rng;

use crate::compressor::{Conv, Encoded};
use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scheme::{Group, LevelScheme};

/// Decoder weights of one depth level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelDecoder {
    pub scheme: LevelScheme,
    /// Context vector to `b` ancestor slots (`D x bD`).
    pub up_top: Conv,
    /// `up_children[t - 1]` expands a tier-`t` slot into eight tier-`(t-1)` slots.
    pub up_children: Vec<Conv>,
    /// Masked block convolution per tier, `None` where the block size is 1.
    pub blocks: Vec<Option<ParamId>>,
}

impl LevelDecoder {
    pub fn init(store: &mut ParamStore, depth: u32, scheme: LevelScheme, width: usize, rng: &mut impl Rng) -> Self {
        let up_top = Conv::init(store, &format!("level{depth}.up_top"), width, scheme.group * width, 1.0, rng);
        let up_children = (1..=scheme.collapse)
            .map(|t| Conv::init(store, &format!("level{depth}.up_child{t}"), width, 8 * width, 1.0, rng))
            .collect();
        let blocks = (0..=scheme.collapse)
            .map(|t| {
                let m = scheme.block_size(t);
                (m >= 2).then(|| {
                    let std = 0.5 / ((m * width) as f64).sqrt();
                    store.add_normal(format!("level{depth}.block{t}"), m * width, m * width, std, rng)
                })
            })
            .collect();
        Self {
            scheme,
            up_top,
            up_children,
            blocks,
        }
    }
}

/// Final linear layer to (EMPTY, MIXED, FULL) logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputHead(pub Conv);

impl OutputHead {
    pub fn init(store: &mut ParamStore, width: usize, rng: &mut impl Rng) -> Self {
        Self(Conv::init(store, "head", width, 3, 0.1, rng))
    }
}

/// Upsamples one context row per group into its `b` ancestor slots.
pub fn upsample_top(g: &mut Graph, dec: &LevelDecoder, ctx: Var) -> Var {
    let (n, width) = g.shape(ctx);
    let up = dec.up_top.apply(g, ctx);
    g.reshape(up, n * dec.scheme.group, width)
}

/// Expands the selected slots (one row each) into eight child slots.
pub fn expand_children(g: &mut Graph, conv: &Conv, parents: Var) -> Var {
    let (n, width) = g.shape(parents);
    let up = conv.apply(g, parents);
    g.reshape(up, 8 * n, width)
}

/// Within-block causal contributions: `contrib` rows are grouped in blocks of
/// `m`; output row `j` of a block is `sum_{k<j} A[j][k] contrib_k`.
pub fn block_context(g: &mut Graph, weights: ParamId, m: usize, contrib: Var) -> Var {
    let (n, width) = g.shape(contrib);
    debug_assert_eq!(n % m, 0);
    let stacked = g.reshape(contrib, n / m, m * width);
    let w = g.param(weights);
    let mixed = g.block_causal(stacked, w, m);
    g.reshape(mixed, n, width)
}

/// Parent-tier contributions of finished child blocks. Row `i` of the
/// result is the block-convolved sum over earlier MIXED siblings' subtree
/// summaries; leaf siblings contribute zero.
pub fn lift_and_redistribute(
    g: &mut Graph,
    weights: ParamId,
    m: usize,
    summaries: Var,
    tier: &[Option<usize>],
    mixed: &[bool],
) -> Var {
    let idx = tier
        .iter()
        .enumerate()
        .map(|(k, node)| node.filter(|&i| mixed[i]).map(|_| k))
        .collect();
    let contrib = g.gather(summaries, idx);
    block_context(g, weights, m, contrib)
}

/// Logits for every tier-0 slot of `groups`, one row per entry of
/// `enc.tiers[0]`. `ctx` has one row per group; `pos` rows are addressed like
/// the embeddings that produced `enc`.
pub fn decode_level(
    g: &mut Graph,
    dec: &LevelDecoder,
    head: &OutputHead,
    ctx: Var,
    enc: &Encoded,
    pos: Var,
    mixed: &[bool],
) -> Var {
    let a = dec.scheme.collapse as usize;
    let mut slots = upsample_top(g, dec, ctx);
    for t in (1..=a).rev() {
        if let Some(w) = dec.blocks[t] {
            let delta = lift_and_redistribute(g, w, dec.scheme.block_size(t as u32), enc.reps[t], &enc.tiers[t], mixed);
            slots = g.add(slots, delta);
        }
        let parents: Vec<Option<usize>> = enc.tiers[t]
            .iter()
            .enumerate()
            .filter(|(_, node)| node.is_some_and(|i| mixed[i]))
            .map(|(k, _)| Some(k))
            .collect();
        let selected = g.gather(slots, parents);
        slots = expand_children(g, &dec.up_children[t - 1], selected);
    }
    let slot_pos = g.gather(pos, enc.tiers[0].clone());
    slots = g.add(slots, slot_pos);
    if let Some(w) = dec.blocks[0] {
        let delta = block_context(g, w, dec.scheme.block_size(0), enc.reps[0]);
        slots = g.add(slots, delta);
    }
    head.0.apply(g, slots)
}

/// Softmax over one slot's three logits.
pub fn slot_logits(store: &ParamStore, head: &OutputHead, slot: &[f64]) -> Result<[f64; 3]> {
    if slot.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slot vector".into()));
    }
    let w = store.get(head.0.w);
    let b = store.get(head.0.b);
    let logits: Vec<f64> = (0..3)
        .map(|k| b.data()[k] + slot.iter().enumerate().map(|(i, s)| s * w.get(i, k)).sum::<f64>())
        .collect();
    let p = softmax(&logits);
    Ok([p[0], p[1], p[2]])
}

/// Number of tier-0 slots a group produces.
pub fn group_slot_count(group: &Group) -> usize {
    group.tiers[0].len()
}

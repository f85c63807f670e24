//! Turns token embeddings into one latent per group.
//!
//! Within a group, the eight children of each MIXED node are combined by a
//! stride-8 convolution whose output replaces the node's own embedding; nodes
//! without children keep their embedding. This repeats for `a` tiers, then a
//! stride-`b` convolution merges the ancestor slots into the latent. Padded
//! slots contribute zeros.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scheme::{Group, LevelScheme};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    /// Weight `fan_in x fan_out` with scaled normal init, zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), fan_in, fan_out, gain / (fan_in as f64).sqrt(), rng);
        let b = store.add_zeros(format!("{name}.b"), 1, fan_out);
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

/// Encoder weights of one depth level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelEncoder {
    pub scheme: LevelScheme,
    /// `siblings[t - 1]` merges eight tier-`(t-1)` vectors into a tier-`t` node.
    pub siblings: Vec<Conv>,
    /// Merges the `b` top-tier slots into the latent.
    pub top: Conv,
}

impl LevelEncoder {
    pub fn init(store: &mut ParamStore, depth: u32, scheme: LevelScheme, width: usize, rng: &mut impl Rng) -> Self {
        let siblings = (1..=scheme.collapse)
            .map(|t| Conv::init(store, &format!("level{depth}.enc_sib{t}"), 8 * width, width, 1.0, rng))
            .collect();
        let top = Conv::init(store, &format!("level{depth}.enc_top"), scheme.group * width, width, 1.0, rng);
        Self { scheme, siblings, top }
    }
}

/// Node vectors of every tier plus the resulting latents.
pub struct Encoded {
    /// `tiers[t]`: concatenated tier-`t` node lists of all groups.
    pub tiers: Vec<Vec<Option<usize>>>,
    /// `reps[t]`: one row per entry of `tiers[t]`.
    pub reps: Vec<Var>,
    /// One row per group.
    pub latents: Var,
}

/// Encodes every group of one level. `emb` rows are addressed by the token
/// indices stored in the groups; `mixed[i]` tells whether row `i` has children.
pub fn encode_level(g: &mut Graph, enc: &LevelEncoder, groups: &[Group], emb: Var, mixed: &[bool]) -> Encoded {
    let a = enc.scheme.collapse as usize;
    let width = g.shape(emb).1;
    let tiers: Vec<Vec<Option<usize>>> = (0..=a)
        .map(|t| groups.iter().flat_map(|grp| grp.tiers[t].iter().copied()).collect())
        .collect();
    let n_emb = g.shape(emb).0;

    let mut reps = Vec::with_capacity(a + 1);
    reps.push(g.gather(emb, tiers[0].clone()));
    for t in 1..=a {
        let below = reps[t - 1];
        let n_below = tiers[t - 1].len();
        let n_mixed = tiers[t].iter().flatten().filter(|&&i| mixed[i]).count();
        assert_eq!(n_below, 8 * n_mixed, "tier {t} children misaligned");
        let stacked = g.reshape(below, n_mixed, 8 * width);
        let merged = enc.siblings[t - 1].apply(g, stacked);
        let pool = g.concat_rows(vec![merged, emb]);
        let mut next_mixed = 0;
        let idx = tiers[t]
            .iter()
            .map(|node| {
                node.map(|i| {
                    if mixed[i] {
                        next_mixed += 1;
                        next_mixed - 1
                    } else {
                        n_mixed + i
                    }
                })
            })
            .collect();
        debug_assert!(tiers[t].iter().flatten().all(|&i| i < n_emb));
        reps.push(g.gather(pool, idx));
    }
    let top = reps[a];
    let stacked = g.reshape(top, groups.len(), enc.scheme.group * width);
    let latents = enc.top.apply(g, stacked);
    Encoded { tiers, reps, latents }
}

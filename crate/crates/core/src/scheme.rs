//! Compression schemes and the token-to-group partition they induce.
//!
//! A scheme assigns each depth `l` a pair `a/b`: subtrees of depth `a` are
//! collapsed into their ancestor at depth `l - a`, and `b` consecutive
//! ancestor slots are combined into one latent. `0/1` leaves a level
//! uncompressed. Ancestor runs are taken over all cells of depth `l - a` in
//! sequence order; runs that own no depth-`l` descendant produce no group.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::octree::CellValue;
use crate::sequence::{TokenLinks, TokenSequence};

pub const GROUP_SIZES: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LevelScheme {
    /// Depth of collapsed subtrees (`a`).
    pub collapse: u32,
    /// Ancestor slots per latent (`b`).
    pub group: usize,
}

impl LevelScheme {
    pub const IDENTITY: LevelScheme = LevelScheme {
        collapse: 0,
        group: 1,
    };

    /// Block size used by the masked block convolution on tier `tier`
    /// (0 = generated tokens, `collapse` = ancestor slots).
    pub fn block_size(&self, tier: u32) -> usize {
        if tier == self.collapse {
            self.group
        } else {
            8
        }
    }
}

impl fmt::Display for LevelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.collapse, self.group)
    }
}

/// Per-depth compression factors. Trees deeper than the list reuse its last entry.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CompressionScheme {
    levels: Vec<LevelScheme>,
}

impl CompressionScheme {
    pub fn new(levels: Vec<LevelScheme>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Scheme("scheme has no levels".into()));
        }
        for (i, l) in levels.iter().enumerate() {
            let depth = i as u32 + 1;
            if !GROUP_SIZES.contains(&l.group) {
                return Err(Error::Scheme(format!(
                    "level {depth}: group size {} not in {{1,2,4,8}}",
                    l.group
                )));
            }
            if l.collapse >= depth {
                return Err(Error::Scheme(format!(
                    "level {depth}: collapse depth {} must be below {depth}",
                    l.collapse
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for entry in text.split(',') {
            let entry = entry.trim();
            let (a, b) = entry
                .split_once('/')
                .ok_or_else(|| Error::Scheme(format!("expected a/b, found {entry:?}")))?;
            let collapse = a
                .trim()
                .parse::<u32>()
                .map_err(|_| Error::Scheme(format!("bad collapse depth in {entry:?}")))?;
            let group = b
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Scheme(format!("bad group size in {entry:?}")))?;
            levels.push(LevelScheme { collapse, group });
        }
        Self::new(levels)
    }

    pub fn identity() -> Self {
        Self {
            levels: vec![LevelScheme::IDENTITY],
        }
    }

    pub fn entries(&self) -> &[LevelScheme] {
        &self.levels
    }

    /// Factors for `depth` (1-based).
    pub fn level(&self, depth: u32) -> LevelScheme {
        let i = (depth as usize).min(self.levels.len()) - 1;
        self.levels[i]
    }

    /// The scheme spelled out for every depth up to `max_depth`.
    pub fn expanded(&self, max_depth: u32) -> Vec<LevelScheme> {
        (1..=max_depth).map(|d| self.level(d)).collect()
    }
}

impl FromStr for CompressionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for CompressionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// One latent's worth of tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub depth: u32,
    pub scheme: LevelScheme,
    /// `tiers[t]` lists token indices at depth `depth - t`. The top tier
    /// (`t = collapse`) holds the `group` ancestor slots, `None` for padding;
    /// every lower tier holds the eight children of each MIXED node above it.
    pub tiers: Vec<Vec<Option<usize>>>,
}

impl Group {
    pub fn top(&self) -> &[Option<usize>] {
        &self.tiers[self.scheme.collapse as usize]
    }

    /// Indices of the depth-`depth` tokens this group generates, in order.
    pub fn generated(&self) -> impl Iterator<Item = usize> + '_ {
        self.tiers[0].iter().flatten().copied()
    }

    pub fn num_generated(&self) -> usize {
        self.tiers[0].iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: Vec<Group>,
    /// Range of `groups` belonging to each depth, index 0 = depth 1.
    pub level_groups: Vec<Range<usize>>,
}

impl GroupLayout {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn latents_per_level(&self) -> Vec<usize> {
        self.level_groups.iter().map(|r| r.len()).collect()
    }
}

/// Groups of one depth. Only the structure of shallower levels is read, so the
/// values at `depth` itself may be placeholders.
pub fn plan_level(
    seq: &TokenSequence,
    links: &TokenLinks,
    ranges: &[Range<usize>],
    scheme: &CompressionScheme,
    depth: u32,
) -> Vec<Group> {
    let ls = scheme.level(depth);
    let a = ls.collapse;
    let anc_depth = depth - a;
    let ancestors = ranges[anc_depth as usize - 1].clone();
    let mut groups = Vec::new();
    for start in ancestors.clone().step_by(ls.group) {
        let top: Vec<Option<usize>> = (start..start + ls.group)
            .map(|i| (i < ancestors.end).then_some(i))
            .collect();
        let mut tiers = vec![Vec::new(); a as usize + 1];
        tiers[a as usize] = top;
        for t in (0..a as usize).rev() {
            let mut lower = Vec::new();
            for &node in tiers[t + 1].iter().flatten() {
                if seq.tokens[node].value.is_mixed() {
                    if let Some(fc) = links.first_child[node] {
                        lower.extend((fc..fc + 8).map(Some));
                    }
                }
            }
            tiers[t] = lower;
        }
        if tiers[0].iter().any(Option::is_some) {
            groups.push(Group {
                depth,
                scheme: ls,
                tiers,
            });
        }
    }
    groups
}

pub fn plan_groups(seq: &TokenSequence, scheme: &CompressionScheme) -> GroupLayout {
    let links = seq.links();
    let ranges = seq.level_ranges();
    let mut groups = Vec::new();
    let mut level_groups = Vec::with_capacity(ranges.len());
    for depth in 1..=ranges.len() as u32 {
        let start = groups.len();
        groups.extend(plan_level(seq, &links, &ranges, scheme, depth));
        level_groups.push(start..groups.len());
    }
    GroupLayout {
        groups,
        level_groups,
    }
}

/// Latent count per depth, computed from per-depth cell values without
/// building a layout.
pub fn expected_latent_count(level_values: &[Vec<CellValue>], scheme: &CompressionScheme) -> Vec<usize> {
    // deepest[d][i]: deepest level reached below cell i of depth d+1.
    let n = level_values.len();
    let mut deepest: Vec<Vec<usize>> = vec![Vec::new(); n];
    for d in (0..n).rev() {
        let mut next_child = 0;
        deepest[d] = level_values[d]
            .iter()
            .map(|v| {
                if v.is_mixed() && d + 1 < n {
                    let below = deepest[d + 1][next_child..next_child + 8]
                        .iter()
                        .copied()
                        .max()
                        .unwrap_or(d + 1);
                    next_child += 8;
                    below
                } else {
                    d + 1
                }
            })
            .collect();
    }
    (1..=n)
        .map(|depth| {
            let ls = scheme.level(depth as u32);
            let anc = &deepest[depth - 1 - ls.collapse as usize];
            anc.chunks(ls.group)
                .filter(|run| run.iter().any(|&r| r >= depth))
                .count()
        })
        .collect()
}

/// Latent counts from per-depth token counts alone, assuming every ancestor
/// run owns descendants. Exact for `a = 0` levels, an upper bound otherwise.
pub fn latent_count_from_token_counts(token_counts: &[usize], scheme: &CompressionScheme) -> Vec<usize> {
    (1..=token_counts.len())
        .map(|depth| {
            if token_counts[depth - 1] == 0 {
                return 0;
            }
            let ls = scheme.level(depth as u32);
            token_counts[depth - 1 - ls.collapse as usize].div_ceil(ls.group)
        })
        .collect()
}

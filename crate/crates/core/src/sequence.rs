//! Breadth-first token sequences and per-axis spatial IDs.
//!
//! A sequence lists every cell below the root level by level. Each token
//! carries its value, depth and one spatial ID per axis; the ID of cell index
//! `i` at depth `d` is `2^d - 2 + i`, which enumerates cells along one axis from
//! coarse to fine without collisions between depths.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::octree::{CellValue, Octree};

/// Deepest tree accepted when decoding sequences (resolution 1024).
pub const MAX_SEQUENCE_DEPTH: usize = 10;

pub const SEQUENCE_HEADER: &str = "#octoseq v1";

/// Per-axis spatial IDs of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpatialId(pub [u32; 3]);

#[inline]
pub fn axis_id(depth: u32, index: u32) -> u32 {
    (1u32 << depth) - 2 + index
}

/// Number of distinct axis IDs used by trees up to `max_depth`.
pub fn axis_id_count(max_depth: u32) -> usize {
    (1usize << (max_depth + 1)) - 2
}

pub fn spatial_ids(depth: u32, coords: [u32; 3]) -> Result<SpatialId> {
    if depth == 0 || depth as usize > MAX_SEQUENCE_DEPTH {
        return Err(Error::InvalidArgument(format!("depth {depth} out of range")));
    }
    let n = 1u32 << depth;
    if coords.iter().any(|&c| c >= n) {
        return Err(Error::InvalidArgument(format!(
            "coords {coords:?} outside [0, {n}) at depth {depth}"
        )));
    }
    Ok(SpatialId(coords.map(|c| axis_id(depth, c))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    pub value: CellValue,
    pub depth: u32,
    pub pos: SpatialId,
}

impl Token {
    /// Cell coordinates at the token's depth.
    pub fn coords(&self) -> [u32; 3] {
        let base = (1u32 << self.depth) - 2;
        self.pos.0.map(|id| id - base)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub class_label: Option<u32>,
}

pub fn linearize(tree: &Octree) -> TokenSequence {
    let mut tokens = Vec::with_capacity(tree.num_cells());
    for (li, level) in tree.levels().iter().enumerate() {
        let depth = li as u32 + 1;
        for cell in level {
            tokens.push(Token {
                value: cell.value,
                depth,
                pos: SpatialId(cell.coords.map(|c| axis_id(depth, c))),
            });
        }
    }
    TokenSequence {
        tokens,
        class_label: None,
    }
}

/// Splits a value list into breadth-first levels. With `allow_open_end`, the
/// final level may still contain MIXED cells whose children are absent.
fn split_levels(values: &[CellValue], allow_open_end: bool) -> Result<Vec<Vec<CellValue>>> {
    if values.is_empty() {
        return Err(Error::MalformedSequence {
            index: 0,
            reason: "empty sequence".into(),
        });
    }
    let mut levels = Vec::new();
    let mut pos = 0;
    let mut size = 8;
    while pos < values.len() {
        if levels.len() == MAX_SEQUENCE_DEPTH {
            return Err(Error::MalformedSequence {
                index: pos,
                reason: format!("deeper than {MAX_SEQUENCE_DEPTH} levels"),
            });
        }
        if size == 0 {
            return Err(Error::MalformedSequence {
                index: pos,
                reason: "tokens after the last level".into(),
            });
        }
        if values.len() - pos < size {
            return Err(Error::MalformedSequence {
                index: values.len(),
                reason: format!(
                    "depth {} needs {size} tokens, only {} left",
                    levels.len() + 1,
                    values.len() - pos
                ),
            });
        }
        let level = values[pos..pos + size].to_vec();
        pos += size;
        size = 8 * level.iter().filter(|v| v.is_mixed()).count();
        levels.push(level);
    }
    if size != 0 && !allow_open_end {
        return Err(Error::MalformedSequence {
            index: values.len(),
            reason: format!("{} children of MIXED cells missing", size),
        });
    }
    Ok(levels)
}

pub fn delinearize(values: &[CellValue]) -> Result<Octree> {
    Octree::from_level_values(&split_levels(values, false)?)
}

/// Decodes a truncated sequence that ends exactly on a level boundary.
pub fn delinearize_prefix(values: &[CellValue]) -> Result<Octree> {
    Octree::from_level_values(&split_levels(values, true)?)
}

impl TokenSequence {
    /// Rebuilds tokens (with spatial IDs) from a consistent value list.
    pub fn from_values(values: &[CellValue], class_label: Option<u32>) -> Result<Self> {
        let tree = delinearize_prefix(values)?;
        let mut seq = linearize(&tree);
        seq.class_label = class_label;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn values(&self) -> Vec<CellValue> {
        self.tokens.iter().map(|t| t.value).collect()
    }

    pub fn max_depth(&self) -> u32 {
        self.tokens.last().map_or(0, |t| t.depth)
    }

    /// Token index range of each depth, index 0 = depth 1.
    pub fn level_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let d = t.depth as usize;
            if ranges.len() < d {
                ranges.push(i..i + 1);
            } else {
                ranges[d - 1].end = i + 1;
            }
        }
        ranges
    }

    /// Tokens of the first `depth` levels.
    pub fn truncated(&self, depth: u32) -> TokenSequence {
        TokenSequence {
            tokens: self
                .tokens
                .iter()
                .take_while(|t| t.depth <= depth)
                .copied()
                .collect(),
            class_label: self.class_label,
        }
    }

    /// Parent / first-child links in token-index space.
    pub fn links(&self) -> TokenLinks {
        let ranges = self.level_ranges();
        let n = self.tokens.len();
        let mut parent = vec![None; n];
        let mut first_child = vec![None; n];
        for w in ranges.windows(2) {
            let (upper, lower) = (&w[0], &w[1]);
            let mut next = lower.start;
            for i in upper.clone() {
                if self.tokens[i].value.is_mixed() && next < lower.end {
                    first_child[i] = Some(next);
                    for c in next..next + 8 {
                        parent[c] = Some(i);
                    }
                    next += 8;
                }
            }
        }
        TokenLinks {
            parent,
            first_child,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.class_label {
            Some(c) => writeln!(out, "{SEQUENCE_HEADER} class={c}").unwrap(),
            None => writeln!(out, "{SEQUENCE_HEADER} class=none").unwrap(),
        }
        for t in &self.tokens {
            let [x, y, z] = t.pos.0;
            writeln!(out, "{} {} {} {} {}", t.value.code(), t.depth, x, y, z).unwrap();
        }
        out
    }

    /// Parses the line format. Spatial IDs and depths are checked against the
    /// values they must be derivable from.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty sequence file".into()))?;
        let rest = header
            .strip_prefix(SEQUENCE_HEADER)
            .ok_or_else(|| Error::Format(format!("bad header {header:?}")))?;
        let class = rest
            .trim()
            .strip_prefix("class=")
            .ok_or_else(|| Error::Format(format!("bad header {header:?}")))?;
        let class_label = match class {
            "none" => None,
            c => Some(
                c.parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad class label {c:?}")))?,
            ),
        };
        let mut parsed = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<u32> = line
                .split_whitespace()
                .map(|f| f.parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("line {}: {line:?}", ln + 2)))?;
            if fields.len() != 5 {
                return Err(Error::Format(format!(
                    "line {}: expected 5 fields, found {}",
                    ln + 2,
                    fields.len()
                )));
            }
            let value = u8::try_from(fields[0])
                .ok()
                .and_then(CellValue::from_code)
                .ok_or_else(|| Error::Format(format!("line {}: bad value {}", ln + 2, fields[0])))?;
            parsed.push((value, fields[1], [fields[2], fields[3], fields[4]]));
        }
        let values: Vec<CellValue> = parsed.iter().map(|p| p.0).collect();
        let seq = TokenSequence::from_values(&values, class_label)?;
        for (i, (t, p)) in seq.tokens.iter().zip(&parsed).enumerate() {
            if t.depth != p.1 || t.pos.0 != p.2 {
                return Err(Error::MalformedSequence {
                    index: i,
                    reason: "depth or spatial ID inconsistent with values".into(),
                });
            }
        }
        Ok(seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLinks {
    pub parent: Vec<Option<usize>>,
    pub first_child: Vec<Option<usize>>,
}

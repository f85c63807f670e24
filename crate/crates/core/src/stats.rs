//! Corpus token statistics and the latent counts a scheme produces.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::octree::build_octree;
use crate::scheme::{latent_count_from_token_counts, CompressionScheme};

/// Nearest-rank percentile of `values` (`q` in `[0, 100]`).
pub fn percentile(values: &[usize], q: f64) -> usize {
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// One resolution's row of the statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionStats {
    pub resolution: u32,
    pub shapes: usize,
    /// 90th percentile token count per depth, index 0 = depth 1.
    pub tokens_per_depth: Vec<usize>,
    pub latents_per_depth: Vec<usize>,
}

impl ResolutionStats {
    pub fn tokens(&self) -> usize {
        self.tokens_per_depth.iter().sum()
    }

    pub fn latents(&self) -> usize {
        self.latents_per_depth.iter().sum()
    }
}

/// Per-depth percentile token counts grouped by resolution.
pub fn corpus_stats(grids: &[VoxelGrid], scheme: &CompressionScheme, q: f64) -> Result<Vec<ResolutionStats>> {
    if grids.is_empty() {
        return Err(Error::EmptyDataset("corpus has no shapes".into()));
    }
    let mut by_res: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
    for g in grids {
        let tree = build_octree(g)?;
        let counts: Vec<usize> = tree.levels().iter().map(Vec::len).collect();
        by_res.entry(g.resolution()).or_default().push(counts);
    }
    Ok(by_res
        .into_iter()
        .map(|(resolution, shapes)| {
            let depth = shapes.iter().map(Vec::len).max().unwrap_or(0);
            let tokens_per_depth: Vec<usize> = (0..depth)
                .map(|d| {
                    let col: Vec<usize> = shapes.iter().map(|c| c.get(d).copied().unwrap_or(0)).collect();
                    percentile(&col, q)
                })
                .collect();
            ResolutionStats {
                resolution,
                shapes: shapes.len(),
                latents_per_depth: latent_count_from_token_counts(&tokens_per_depth, scheme),
                tokens_per_depth,
            }
        })
        .collect())
}

/// Table of resolutions with token and latent totals per depth.
pub struct StatsTable<'a> {
    pub rows: &'a [ResolutionStats],
    pub scheme: &'a CompressionScheme,
}

impl fmt::Display for StatsTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scheme {}", self.scheme)?;
        writeln!(f, "{:>6} {:>7} {:>8} {:>8}  per depth (tokens/latents)", "res", "shapes", "tokens", "latents")?;
        for r in self.rows {
            let per: Vec<String> = r
                .tokens_per_depth
                .iter()
                .zip(&r.latents_per_depth)
                .map(|(t, l)| format!("{t}/{l}"))
                .collect();
            writeln!(
                f,
                "{:>6} {:>7} {:>8} {:>8}  {}",
                r.resolution,
                r.shapes,
                r.tokens(),
                r.latents(),
                per.join(" ")
            )?;
        }
        Ok(())
    }
}

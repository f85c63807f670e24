//! Octree construction from voxel grids and back.
//!
//! The root is implicit and always subdivided, so depth 1 always holds exactly
//! eight cells. Children of a cell are stored contiguously on the next level in
//! child-index order `4 * z_bit + 2 * y_bit + x_bit`.

use crate::error::{Error, Result};
use crate::grid::{depth_for_resolution, VoxelGrid};

/// Cell state. The numeric codes are the token values used in sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CellValue {
    Empty = 1,
    Mixed = 2,
    Full = 3,
}

impl CellValue {
    pub const ALL: [CellValue; 3] = [CellValue::Empty, CellValue::Mixed, CellValue::Full];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(CellValue::Empty),
            2 => Some(CellValue::Mixed),
            3 => Some(CellValue::Full),
            _ => None,
        }
    }

    /// Index into a 3-way logit vector (EMPTY, MIXED, FULL).
    pub fn class_index(self) -> usize {
        self as usize - 1
    }

    pub fn from_class_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn is_mixed(self) -> bool {
        self == CellValue::Mixed
    }
}

/// Offset of child `index` relative to twice the parent's coordinates.
#[inline]
pub fn child_offset(index: usize) -> [u32; 3] {
    [
        (index & 1) as u32,
        ((index >> 1) & 1) as u32,
        ((index >> 2) & 1) as u32,
    ]
}

#[inline]
pub fn child_coords(parent: [u32; 3], index: usize) -> [u32; 3] {
    let o = child_offset(index);
    [2 * parent[0] + o[0], 2 * parent[1] + o[1], 2 * parent[2] + o[2]]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub value: CellValue,
    /// Cell indices at this cell's depth, each in `[0, 2^depth)`.
    pub coords: [u32; 3],
    /// Index of the parent on the previous level; `None` on depth 1 (parent is the root).
    pub parent: Option<usize>,
    /// Index of the first of eight children on the next level.
    pub first_child: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Octree {
    levels: Vec<Vec<Cell>>,
}

impl Octree {
    /// Builds a tree from per-depth value lists in breadth-first order,
    /// assigning coordinates and links. `values_by_level[0]` is depth 1.
    pub fn from_level_values(values_by_level: &[Vec<CellValue>]) -> Result<Self> {
        let mut levels: Vec<Vec<Cell>> = Vec::with_capacity(values_by_level.len());
        for (li, values) in values_by_level.iter().enumerate() {
            let expected = match levels.last() {
                None => 8,
                Some(prev) => 8 * prev.iter().filter(|c| c.value.is_mixed()).count(),
            };
            if values.len() != expected {
                return Err(Error::InvalidTree(format!(
                    "depth {} has {} cells, expected {}",
                    li + 1,
                    values.len(),
                    expected
                )));
            }
            let mut level = Vec::with_capacity(values.len());
            match levels.last_mut() {
                None => {
                    for (i, &value) in values.iter().enumerate() {
                        level.push(Cell {
                            value,
                            coords: child_offset(i),
                            parent: None,
                            first_child: None,
                        });
                    }
                }
                Some(prev) => {
                    let mut next = 0;
                    for (pi, parent) in prev.iter_mut().enumerate() {
                        if !parent.value.is_mixed() {
                            continue;
                        }
                        parent.first_child = Some(next);
                        for ci in 0..8 {
                            level.push(Cell {
                                value: values[next],
                                coords: child_coords(parent.coords, ci),
                                parent: Some(pi),
                                first_child: None,
                            });
                            next += 1;
                        }
                    }
                }
            }
            levels.push(level);
        }
        if levels.is_empty() {
            return Err(Error::InvalidTree("tree has no levels".into()));
        }
        Ok(Self { levels })
    }

    /// Number of levels below the root.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Cells at `depth` (1-based).
    pub fn level(&self, depth: usize) -> &[Cell] {
        &self.levels[depth - 1]
    }

    pub fn levels(&self) -> &[Vec<Cell>] {
        &self.levels
    }

    pub fn num_cells(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn level_values(&self) -> Vec<Vec<CellValue>> {
        self.levels
            .iter()
            .map(|l| l.iter().map(|c| c.value).collect())
            .collect()
    }

    /// MIXED cell count per depth, index 0 = depth 1.
    pub fn mixed_counts(&self) -> Vec<usize> {
        self.levels
            .iter()
            .map(|l| l.iter().filter(|c| c.value.is_mixed()).count())
            .collect()
    }

    /// True when no MIXED cell is left without children.
    pub fn is_complete(&self) -> bool {
        self.levels
            .last()
            .is_some_and(|l| l.iter().all(|c| !c.value.is_mixed()))
    }
}

/// Subdivides the grid recursively; the root is always split.
pub fn build_octree(grid: &VoxelGrid) -> Result<Octree> {
    let max_depth = depth_for_resolution(grid.resolution())
        .ok_or_else(|| Error::Format("resolution is not a power of two".into()))?
        as usize;

    // pyramid[d - 1] holds dense cell values at depth d, x-fastest.
    let mut pyramid: Vec<Vec<CellValue>> = vec![Vec::new(); max_depth];
    pyramid[max_depth - 1] = (0..grid.len())
        .map(|i| {
            if grid.get_index(i) {
                CellValue::Full
            } else {
                CellValue::Empty
            }
        })
        .collect();
    for d in (1..max_depth).rev() {
        let n = 1usize << d;
        let fine = &pyramid[d];
        let nf = 2 * n;
        let mut coarse = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let first = fine[2 * x + nf * (2 * y + nf * 2 * z)];
                    let uniform = !first.is_mixed()
                        && (1..8).all(|ci| {
                            let o = child_offset(ci);
                            let (fx, fy, fz) = (
                                2 * x + o[0] as usize,
                                2 * y + o[1] as usize,
                                2 * z + o[2] as usize,
                            );
                            fine[fx + nf * (fy + nf * fz)] == first
                        });
                    coarse.push(if uniform { first } else { CellValue::Mixed });
                }
            }
        }
        pyramid[d - 1] = coarse;
    }

    let lookup = |depth: usize, c: [u32; 3]| {
        let n = 1usize << depth;
        pyramid[depth - 1][c[0] as usize + n * (c[1] as usize + n * c[2] as usize)]
    };

    let mut levels: Vec<Vec<Cell>> = Vec::new();
    let first: Vec<Cell> = (0..8)
        .map(|i| {
            let coords = child_offset(i);
            Cell {
                value: lookup(1, coords),
                coords,
                parent: None,
                first_child: None,
            }
        })
        .collect();
    levels.push(first);
    while levels.len() < max_depth {
        let depth = levels.len() + 1;
        let prev = levels.last_mut().unwrap();
        let mut next = Vec::new();
        for (pi, parent) in prev.iter_mut().enumerate() {
            if !parent.value.is_mixed() {
                continue;
            }
            parent.first_child = Some(next.len());
            for ci in 0..8 {
                let coords = child_coords(parent.coords, ci);
                next.push(Cell {
                    value: lookup(depth, coords),
                    coords,
                    parent: Some(pi),
                    first_child: None,
                });
            }
        }
        if next.is_empty() {
            break;
        }
        levels.push(next);
    }
    Ok(Octree { levels })
}

/// Paints every leaf cube into a grid of the given resolution.
pub fn octree_to_voxels(tree: &Octree, resolution: u32) -> Result<VoxelGrid> {
    let grid_depth = depth_for_resolution(resolution)
        .ok_or_else(|| Error::Format(format!("resolution {resolution} is not a power of two")))?
        as usize;
    if grid_depth < tree.depth() {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} is coarser than tree depth {}",
            tree.depth()
        )));
    }
    let mut grid = VoxelGrid::empty(resolution)?;
    for (li, level) in tree.levels.iter().enumerate() {
        let depth = li + 1;
        let size = resolution >> depth;
        for cell in level {
            match cell.value {
                CellValue::Mixed => {
                    if cell.first_child.is_none() {
                        return Err(Error::InvalidTree(format!(
                            "MIXED leaf at depth {depth}, coords {:?}",
                            cell.coords
                        )));
                    }
                }
                CellValue::Full => grid.fill_cube(
                    [cell.coords[0] * size, cell.coords[1] * size, cell.coords[2] * size],
                    size,
                    true,
                ),
                CellValue::Empty => {}
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use CellValue::*;

    fn values(tree: &Octree, depth: usize) -> Vec<CellValue> {
        tree.level(depth).iter().map(|c| c.value).collect()
    }

    #[test]
    fn uniform_grids_still_split_root() {
        let t = build_octree(&VoxelGrid::empty(2).unwrap()).unwrap();
        assert_eq!(t.depth(), 1);
        assert_eq!(values(&t, 1), vec![Empty; 8]);
        let t = build_octree(&VoxelGrid::filled(8, true).unwrap()).unwrap();
        assert_eq!(t.depth(), 1);
        assert_eq!(values(&t, 1), vec![Full; 8]);
    }

    #[test]
    fn single_voxel_is_child_zero() {
        let mut g = VoxelGrid::empty(2).unwrap();
        g.set(0, 0, 0, true);
        let t = build_octree(&g).unwrap();
        let mut expected = vec![Empty; 8];
        expected[0] = Full;
        assert_eq!(values(&t, 1), expected);
    }

    #[test]
    fn child_order_is_x_fastest() {
        // voxel (1,0,1) -> index 4*1 + 2*0 + 1 = 5
        let mut g = VoxelGrid::empty(2).unwrap();
        g.set(1, 0, 1, true);
        let t = build_octree(&g).unwrap();
        assert_eq!(t.level(1)[5].value, Full);
        assert_eq!(t.level(1)[5].coords, [1, 0, 1]);
    }

    #[test]
    fn inverse_of_single_voxel() {
        let mut v = vec![Empty; 8];
        v[0] = Full;
        let t = Octree::from_level_values(&[v]).unwrap();
        let g = octree_to_voxels(&t, 2).unwrap();
        assert!(g.get(0, 0, 0));
        assert_eq!(g.count_occupied(), 1);
        // the same tree painted at res 4 fills the whole octant
        let g = octree_to_voxels(&t, 4).unwrap();
        assert_eq!(g.count_occupied(), 8);
        assert!(g.get(1, 1, 1) && !g.get(2, 0, 0));
    }

    #[test]
    fn mixed_leaf_is_rejected() {
        let mut v = vec![Empty; 8];
        v[3] = Mixed;
        // from_level_values accepts a truncated tree, painting must not.
        let t = Octree::from_level_values(&[v]).unwrap();
        assert!(!t.is_complete());
        assert!(matches!(octree_to_voxels(&t, 2), Err(Error::InvalidTree(_))));
    }

    #[test]
    fn resolution_too_coarse() {
        let mut g = VoxelGrid::empty(8).unwrap();
        g.set(3, 3, 3, true);
        let t = build_octree(&g).unwrap();
        assert_eq!(t.depth(), 3);
        assert!(octree_to_voxels(&t, 4).is_err());
        assert!(octree_to_voxels(&t, 6).is_err());
        let up = octree_to_voxels(&t, 16).unwrap();
        assert_eq!(up.count_occupied(), 8);
    }

    #[test]
    fn children_are_inside_parent() {
        let g = VoxelGrid::from_fn(16, |x, y, z| x * x + y * y + z * z < 120).unwrap();
        let t = build_octree(&g).unwrap();
        for d in 2..=t.depth() {
            let parents = t.level(d - 1);
            for c in t.level(d) {
                let p = &parents[c.parent.unwrap()];
                assert!(p.value.is_mixed());
                for a in 0..3 {
                    assert_eq!(c.coords[a] / 2, p.coords[a]);
                    assert!(c.coords[a] < 1 << d);
                }
            }
        }
        assert_eq!(octree_to_voxels(&t, 16).unwrap(), g);
    }
}

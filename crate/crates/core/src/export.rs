//! Mesh and image export for inspecting voxel grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Obj,
    Slices,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obj" => Ok(ExportFormat::Obj),
            "slices" => Ok(ExportFormat::Slices),
            _ => Err(Error::InvalidArgument(format!("unknown export format {s:?}; use obj or slices"))),
        }
    }
}

// Corner k of the unit cube sits at (k & 1, (k >> 1) & 1, k >> 2).
const CUBE_FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // -x
    [1, 3, 7, 5], // +x
    [0, 1, 5, 4], // -y
    [2, 6, 7, 3], // +y
    [0, 2, 3, 1], // -z
    [4, 5, 7, 6], // +z
];

/// One closed unit cube (8 vertices, 12 triangles) per occupied voxel.
pub fn to_obj(grid: &VoxelGrid) -> String {
    let mut out = String::from("# voxel cubes\n");
    let res = grid.resolution();
    let mut base = 1;
    for z in 0..res {
        for y in 0..res {
            for x in 0..res {
                if !grid.get(x, y, z) {
                    continue;
                }
                for k in 0..8u32 {
                    writeln!(out, "v {} {} {}", x + (k & 1), y + ((k >> 1) & 1), z + (k >> 2)).unwrap();
                }
                for [a, b, c, d] in CUBE_FACES {
                    writeln!(out, "f {} {} {}", base + a, base + b, base + c).unwrap();
                    writeln!(out, "f {} {} {}", base + a, base + c, base + d).unwrap();
                }
                base += 8;
            }
        }
    }
    out
}

/// Binary PGM of slice `z`: occupied voxels white, row 0 = y 0.
pub fn slice_pgm(grid: &VoxelGrid, z: u32) -> Vec<u8> {
    let res = grid.resolution();
    let mut out = format!("P5\n{res} {res}\n255\n").into_bytes();
    for y in 0..res {
        for x in 0..res {
            out.push(if grid.get(x, y, z) { 255 } else { 0 });
        }
    }
    out
}

/// Writes the grid in `format`. `obj` writes `path` itself; `slices` treats
/// `path` as a directory and writes `slice_000.pgm`, ... in z order.
pub fn export(grid: &VoxelGrid, format: ExportFormat, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    match format {
        ExportFormat::Obj => {
            fs::write(path, to_obj(grid))?;
            Ok(vec![path.to_path_buf()])
        }
        ExportFormat::Slices => {
            fs::create_dir_all(path)?;
            (0..grid.resolution())
                .map(|z| {
                    let p = path.join(format!("slice_{z:03}.pgm"));
                    fs::write(&p, slice_pgm(grid, z))?;
                    Ok(p)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(obj: &str, prefix: &str) -> usize {
        obj.lines().filter(|l| l.starts_with(prefix)).count()
    }

    #[test]
    fn empty_grid_has_no_faces() {
        let obj = to_obj(&VoxelGrid::empty(4).unwrap());
        assert_eq!((count(&obj, "v "), count(&obj, "f ")), (0, 0));
    }

    #[test]
    fn single_voxel_cube() {
        let mut g = VoxelGrid::empty(4).unwrap();
        g.set(1, 2, 3, true);
        let obj = to_obj(&g);
        assert_eq!((count(&obj, "v "), count(&obj, "f ")), (8, 12));
        assert!(obj.contains("v 1 2 3\n") && obj.contains("v 2 3 4\n"));
    }

    /// Every cube edge is shared by exactly two triangles with opposite
    /// orientation, and all face normals point outward.
    #[test]
    fn cube_is_closed_and_outward() {
        let corner = |k: usize| [(k & 1) as f64, ((k >> 1) & 1) as f64, (k >> 2) as f64];
        let mut edges = std::collections::HashMap::new();
        for face in CUBE_FACES {
            for tri in [[face[0], face[1], face[2]], [face[0], face[2], face[3]]] {
                for e in 0..3 {
                    *edges.entry((tri[e], tri[(e + 1) % 3])).or_insert(0) += 1;
                }
                let [a, b, c] = tri.map(corner);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
                let centre: Vec<f64> = (0..3).map(|i| (a[i] + b[i] + c[i]) / 3.0 - 0.5).collect();
                assert!(n.iter().zip(&centre).map(|(x, y)| x * y).sum::<f64>() > 0.0);
            }
        }
        assert_eq!(edges.len(), 36);
        for (&(a, b), &n) in &edges {
            assert_eq!(n, 1);
            assert_eq!(edges.get(&(b, a)), Some(&1));
        }
    }

    #[test]
    fn full_grid_slices_are_white() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGrid::filled(4, true).unwrap();
        let files = export(&g, ExportFormat::Slices, dir.path().join("s")).unwrap();
        assert_eq!(files.len(), 4);
        for f in files {
            let bytes = fs::read(f).unwrap();
            assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
            assert_eq!(&bytes[11..], &[255u8; 16]);
        }
    }

    #[test]
    fn unknown_format() {
        assert!("stl".parse::<ExportFormat>().is_err());
    }
}

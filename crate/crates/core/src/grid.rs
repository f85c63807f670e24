//! Bit-packed cubic occupancy grids and the `OCTV` file format.
//!
//! Voxels are addressed `x + res * (y + res * z)` (x fastest). Bit 0 of byte 0
//! is the first voxel.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const OCTV_MAGIC: &[u8; 4] = b"OCTV";
pub const OCTV_VERSION: u8 = 1;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    resolution: u32,
    bits: Vec<u8>,
}

impl std::fmt::Debug for VoxelGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VoxelGrid")
            .field("resolution", &self.resolution)
            .field("occupied", &self.count_occupied())
            .finish()
    }
}

/// Number of octree levels below the root for a resolution, or `None` if it is
/// not a power of two of at least 2.
pub fn depth_for_resolution(resolution: u32) -> Option<u32> {
    if resolution >= 2 && resolution.is_power_of_two() {
        Some(resolution.trailing_zeros())
    } else {
        None
    }
}

impl VoxelGrid {
    pub fn empty(resolution: u32) -> Result<Self> {
        Self::filled(resolution, false)
    }

    pub fn filled(resolution: u32, value: bool) -> Result<Self> {
        if depth_for_resolution(resolution).is_none() {
            return Err(Error::Format(format!(
                "resolution {resolution} is not a power of two >= 2"
            )));
        }
        // Cap keeps the voxel count addressable and the allocation sane.
        if resolution > 1024 {
            return Err(Error::Format(format!("resolution {resolution} too large")));
        }
        let n = (resolution as usize).pow(3);
        let byte = if value { 0xff } else { 0 };
        Ok(Self {
            resolution,
            bits: vec![byte; n.div_ceil(8)],
        })
    }

    /// Builds a grid by evaluating `f(x, y, z)` for every voxel.
    pub fn from_fn(resolution: u32, mut f: impl FnMut(u32, u32, u32) -> bool) -> Result<Self> {
        let mut grid = Self::empty(resolution)?;
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    if f(x, y, z) {
                        grid.set(x, y, z, true);
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn depth(&self) -> u32 {
        self.resolution.trailing_zeros()
    }

    pub fn len(&self) -> usize {
        (self.resolution as usize).pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32, z: u32) -> usize {
        let r = self.resolution as usize;
        x as usize + r * (y as usize + r * z as usize)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> bool {
        self.get_index(self.index(x, y, z))
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.bits[i >> 3] >> (i & 7)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, z: u32, value: bool) {
        let i = self.index(x, y, z);
        self.set_index(i, value);
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        if value {
            self.bits[i >> 3] |= 1 << (i & 7);
        } else {
            self.bits[i >> 3] &= !(1 << (i & 7));
        }
    }

    /// Sets every voxel of the axis-aligned cube with corner `origin` and edge `size`.
    pub fn fill_cube(&mut self, origin: [u32; 3], size: u32, value: bool) {
        for z in origin[2]..origin[2] + size {
            for y in origin[1]..origin[1] + size {
                for x in origin[0]..origin[0] + size {
                    self.set(x, y, z, value);
                }
            }
        }
    }

    pub fn count_occupied(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn to_octv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.bits.len());
        out.extend_from_slice(OCTV_MAGIC);
        out.push(OCTV_VERSION);
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_octv_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != OCTV_MAGIC {
            return Err(Error::Format("missing OCTV magic".into()));
        }
        if bytes[4] != OCTV_VERSION {
            return Err(Error::Format(format!(
                "unsupported OCTV version {}",
                bytes[4]
            )));
        }
        let resolution = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        let mut grid = Self::empty(resolution)?;
        let payload = &bytes[9..];
        if payload.len() != grid.bits.len() {
            return Err(Error::Format(format!(
                "expected {} occupancy bytes, found {}",
                grid.bits.len(),
                payload.len()
            )));
        }
        grid.bits.copy_from_slice(payload);
        Ok(grid)
    }

    pub fn write_octv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_octv_bytes())?;
        Ok(())
    }

    pub fn read_octv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_octv_bytes(&fs::read(path)?)
    }

    /// Intersection and union voxel counts with another grid of equal resolution.
    pub fn overlap(&self, other: &VoxelGrid) -> Result<(usize, usize)> {
        if self.resolution != other.resolution {
            return Err(Error::Shape(format!(
                "resolution {} vs {}",
                self.resolution, other.resolution
            )));
        }
        let mut inter = 0;
        let mut union = 0;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b).count_ones() as usize;
            union += (a | b).count_ones() as usize;
        }
        Ok((inter, union))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_resolutions() {
        assert!(VoxelGrid::empty(0).is_err());
        assert!(VoxelGrid::empty(1).is_err());
        assert!(VoxelGrid::empty(6).is_err());
        assert!(VoxelGrid::empty(8).is_ok());
    }

    #[test]
    fn octv_layout() {
        let mut g = VoxelGrid::empty(2).unwrap();
        g.set(0, 0, 0, true);
        g.set(1, 1, 1, true);
        let bytes = g.to_octv_bytes();
        assert_eq!(&bytes[..4], b"OCTV");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 10);
        // voxel 0 -> bit 0, voxel 7 -> bit 7
        assert_eq!(bytes[9], 0b1000_0001);
        assert_eq!(VoxelGrid::from_octv_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn octv_errors() {
        assert!(VoxelGrid::from_octv_bytes(b"NOPE").is_err());
        let mut bytes = VoxelGrid::empty(4).unwrap().to_octv_bytes();
        bytes.pop();
        assert!(matches!(
            VoxelGrid::from_octv_bytes(&bytes),
            Err(Error::Format(_))
        ));
        let mut bytes = VoxelGrid::empty(4).unwrap().to_octv_bytes();
        bytes[4] = 2;
        assert!(VoxelGrid::from_octv_bytes(&bytes).is_err());
    }

    #[test]
    fn overlap_counts() {
        let a = VoxelGrid::from_fn(4, |x, _, _| x < 2).unwrap();
        let b = VoxelGrid::from_fn(4, |x, _, _| x < 3).unwrap();
        assert_eq!(a.overlap(&b).unwrap(), (32, 48));
    }
}

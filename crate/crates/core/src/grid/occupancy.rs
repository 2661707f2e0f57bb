use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{linear_index, voxel_count, VoxelIndex};
use crate::{Error, Result, Vec3};

const MAGIC: &[u8; 4] = b"OCCG";
const VERSION: u32 = 1;

/// Hard per-voxel class labels; class 0 is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub min_corner: Vec3,
    /// `(z, y, x)` row-major.
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(dims: [usize; 3], voxel_size: f64, min_corner: Vec3) -> Self {
        OccupancyGrid {
            dims,
            voxel_size,
            min_corner,
            labels: vec![0; voxel_count(dims)],
        }
    }

    pub fn get(&self, idx: VoxelIndex) -> u8 {
        self.labels[linear_index(self.dims, idx)]
    }

    pub fn set(&mut self, idx: VoxelIndex, label: u8) {
        let lin = linear_index(self.dims, idx);
        self.labels[lin] = label;
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Vec3 {
        self.min_corner
            + Vector3::new(
                (idx[0] as f64 + 0.5) * self.voxel_size,
                (idx[1] as f64 + 0.5) * self.voxel_size,
                (idx[2] as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Majority vote over `factor^3` blocks; ties go to the lower class id.
    pub fn downsample_majority(&self, factor: usize) -> Result<OccupancyGrid> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::Shape(format!("dims {:?} not divisible by {factor}", self.dims)));
        }
        let dims = self.dims.map(|d| d / factor);
        let mut out = OccupancyGrid::empty(dims, self.voxel_size * factor as f64, self.min_corner);
        let mut counts = [0usize; 256];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    counts.iter_mut().for_each(|c| *c = 0);
                    for dz in 0..factor {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let l = self.get([x * factor + dx, y * factor + dy, z * factor + dz]);
                                counts[l as usize] += 1;
                            }
                        }
                    }
                    let mut best = 0usize;
                    for (c, &n) in counts.iter().enumerate() {
                        if n > counts[best] {
                            best = c;
                        }
                    }
                    out.set([x, y, z], best as u8);
                }
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.voxel_size as f32).to_le_bytes())?;
        for a in 0..3 {
            w.write_all(&(self.min_corner[a] as f32).to_le_bytes())?;
        }
        w.write_all(&self.labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(36 + self.labels.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::format("OCCG", reason);
        let mut head = [0u8; 36];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let voxel_size = f32_at(20) as f64;
        let min_corner = Vector3::new(f32_at(24) as f64, f32_at(28) as f64, f32_at(32) as f64);
        let mut labels = vec![0u8; voxel_count(dims)];
        r.read_exact(&mut labels).map_err(|_| bad("truncated label payload"))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(&e.to_string()))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(OccupancyGrid {
            dims,
            voxel_size,
            min_corner,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut g = OccupancyGrid::empty([2, 1, 1], 0.5, Vector3::new(-1.0, 0.0, 2.0));
        g.set([1, 0, 0], 7);
        let b = g.to_bytes();
        assert_eq!(&b[0..4], b"OCCG");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 0.5);
        assert_eq!(f32::from_le_bytes(b[24..28].try_into().unwrap()), -1.0);
        assert_eq!(&b[36..], &[0, 7]);
        assert_eq!(OccupancyGrid::from_bytes(&b).unwrap(), g);
    }

    #[test]
    fn rejects_corrupt_input() {
        let g = OccupancyGrid::empty([2, 2, 2], 1.0, Vector3::zeros());
        let mut b = g.to_bytes();
        assert!(OccupancyGrid::from_bytes(&b[..40]).is_err());
        b[0] = b'X';
        assert!(OccupancyGrid::from_bytes(&b).is_err());
    }

    #[test]
    fn majority_vote_prefers_lower_class_on_ties() {
        let mut g = OccupancyGrid::empty([2, 2, 2], 1.0, Vector3::zeros());
        for (i, l) in [1u8, 1, 1, 1, 2, 2, 2, 2].iter().enumerate() {
            g.labels[i] = *l;
        }
        let d = g.downsample_majority(2).unwrap();
        assert_eq!(d.labels, vec![1]);
        assert_eq!(d.voxel_size, 2.0);
    }
}

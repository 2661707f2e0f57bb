//! Voxel grid geometry: configuration, point binning, coarse/fine index
//! arithmetic and the dense feature volumes living on the coarse grid.

mod occupancy;
mod volume;

pub use occupancy::OccupancyGrid;
pub use volume::{trilinear_weights, VoxelFeatureVolume};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Integer voxel coordinate in `(x, y, z)` order.
pub type VoxelIndex = [usize; 3];

/// Row-major `(z, y, x)` linearization shared by every dense array in the crate.
#[inline]
pub fn linear_index(dims: [usize; 3], idx: VoxelIndex) -> usize {
    (idx[2] * dims[1] + idx[1]) * dims[0] + idx[0]
}

#[inline]
pub fn unlinear_index(dims: [usize; 3], lin: usize) -> VoxelIndex {
    let x = lin % dims[0];
    let y = (lin / dims[0]) % dims[1];
    let z = lin / (dims[0] * dims[1]);
    [x, y, z]
}

#[inline]
pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Axis-aligned region partitioned into fine voxels of `voxel_size`, which are
/// aggregated `stride`-fold into the coarse voxels the encoders operate on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
    pub voxel_size: f64,
    pub stride: usize,
}

const EXTENT_TOL: f64 = 1e-6;

impl GridConfig {
    pub fn new(min_corner: Vec3, max_corner: Vec3, voxel_size: f64, stride: usize) -> Result<Self> {
        let cfg = GridConfig {
            min_corner,
            max_corner,
            voxel_size,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale default: an 8 m cube at 0.25 m with coarse stride 4.
    pub fn desk_default() -> Self {
        GridConfig {
            min_corner: Vector3::new(-4.0, -4.0, -2.0),
            max_corner: Vector3::new(4.0, 4.0, 6.0),
            voxel_size: 0.25,
            stride: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel_size must be positive, got {}", self.voxel_size)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let cell = self.coarse_voxel_size();
        for axis in 0..3 {
            let extent = self.max_corner[axis] - self.min_corner[axis];
            if !(extent.is_finite() && extent > 0.0) {
                return Err(Error::Config(format!("axis {axis}: max_corner must exceed min_corner")));
            }
            let cells = extent / cell;
            if (cells - cells.round()).abs() > EXTENT_TOL || cells.round() < 1.0 {
                return Err(Error::Config(format!(
                    "axis {axis}: extent {extent} is not a positive multiple of voxel_size x stride = {cell}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn coarse_voxel_size(&self) -> f64 {
        self.voxel_size * self.stride as f64
    }

    pub fn extent(&self) -> Vec3 {
        self.max_corner - self.min_corner
    }

    /// Coarse dimensions `(x, y, z)`.
    pub fn coarse_dims(&self) -> [usize; 3] {
        let cell = self.coarse_voxel_size();
        let e = self.extent();
        [0, 1, 2].map(|a| (e[a] / cell).round() as usize)
    }

    /// Fine dimensions `(x, y, z)`, i.e. the coarse dims times the stride.
    pub fn fine_dims(&self) -> [usize; 3] {
        self.coarse_dims().map(|d| d * self.stride)
    }

    /// Coarse voxel containing `point`; the min face is inclusive and the max
    /// face exclusive.
    pub fn voxel_index(&self, point: &Vec3) -> Option<VoxelIndex> {
        let dims = self.coarse_dims();
        let cell = self.coarse_voxel_size();
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let p = point[axis];
            if !(p >= self.min_corner[axis] && p < self.max_corner[axis]) {
                return None;
            }
            let i = ((p - self.min_corner[axis]) / cell).floor() as usize;
            idx[axis] = i.min(dims[axis] - 1);
        }
        Some(idx)
    }

    /// World-space center of a coarse voxel.
    pub fn voxel_center(&self, idx: VoxelIndex) -> Vec3 {
        let cell = self.coarse_voxel_size();
        Vector3::new(
            self.min_corner.x + (idx[0] as f64 + 0.5) * cell,
            self.min_corner.y + (idx[1] as f64 + 0.5) * cell,
            self.min_corner.z + (idx[2] as f64 + 0.5) * cell,
        )
    }

    /// Half-open world bounds `[lo, hi)` of a coarse voxel.
    pub fn voxel_bounds(&self, idx: VoxelIndex) -> (Vec3, Vec3) {
        let cell = self.coarse_voxel_size();
        let lo = Vector3::new(
            self.min_corner.x + idx[0] as f64 * cell,
            self.min_corner.y + idx[1] as f64 * cell,
            self.min_corner.z + idx[2] as f64 * cell,
        );
        (lo, lo + Vector3::repeat(cell))
    }

    /// Continuous coarse-voxel coordinates of a world point, with voxel `i`'s
    /// center at `i`.
    pub fn to_center_coords(&self, point: &Vec3) -> Vec3 {
        (point - self.min_corner) / self.coarse_voxel_size() - Vector3::repeat(0.5)
    }

    /// Maps the grid extent onto `[0, 1]^3`.
    pub fn normalize(&self, point: &Vec3) -> Vec3 {
        (point - self.min_corner).component_div(&self.extent())
    }
}

/// Raw points falling in one coarse voxel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBin {
    pub voxel_index: VoxelIndex,
    /// Ascending indices into the source cloud.
    pub point_indices: Vec<usize>,
}

impl VoxelBin {
    /// `N_p^V` in the preprocessing literature.
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BinnedCloud {
    /// Non-empty bins in ascending linear voxel order.
    pub bins: Vec<VoxelBin>,
    /// Points outside the grid.
    pub dropped: usize,
}

/// Assigns every in-grid point to exactly one coarse voxel.
pub fn bin_points(cloud: &[Vec3], cfg: &GridConfig) -> BinnedCloud {
    let dims = cfg.coarse_dims();
    let keys: Vec<Option<usize>> = cloud
        .par_iter()
        .map(|p| cfg.voxel_index(p).map(|i| linear_index(dims, i)))
        .collect();

    let mut keyed: Vec<(usize, usize)> = keys
        .iter()
        .enumerate()
        .filter_map(|(pi, k)| k.map(|lin| (lin, pi)))
        .collect();
    let dropped = cloud.len() - keyed.len();
    // Stable sort keeps source order inside each voxel.
    keyed.sort_by_key(|&(lin, _)| lin);

    let mut bins: Vec<VoxelBin> = Vec::new();
    for (lin, pi) in keyed {
        match bins.last_mut() {
            Some(bin) if linear_index(dims, bin.voxel_index) == lin => bin.point_indices.push(pi),
            _ => bins.push(VoxelBin {
                voxel_index: unlinear_index(dims, lin),
                point_indices: vec![pi],
            }),
        }
    }
    BinnedCloud { bins, dropped }
}

/// One child of a split coarse voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineCell {
    /// Index on the grid refined by `factor`.
    pub index: VoxelIndex,
    /// Child center relative to the parent center, in units of the parent edge.
    pub offset: Vec3,
}

/// Splits a coarse voxel into `factor^3` children tiling it exactly, listed in
/// `(z, y, x)` order.
pub fn split_voxel(coarse: VoxelIndex, factor: usize) -> Vec<FineCell> {
    assert!(factor >= 1, "split factor must be positive");
    let f = factor as f64;
    let mut cells = Vec::with_capacity(factor * factor * factor);
    for dz in 0..factor {
        for dy in 0..factor {
            for dx in 0..factor {
                let rel = |d: usize| (d as f64 + 0.5) / f - 0.5;
                cells.push(FineCell {
                    index: [coarse[0] * factor + dx, coarse[1] * factor + dy, coarse[2] * factor + dz],
                    offset: Vector3::new(rel(dx), rel(dy), rel(dz)),
                });
            }
        }
    }
    cells
}

use serde::{Deserialize, Serialize};

use super::{linear_index, voxel_count, VoxelIndex};
use crate::{Error, Result, Vec3};

/// Dense `(z, y, x, c)` feature volume over a voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelFeatureVolume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VoxelFeatureVolume {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        VoxelFeatureVolume {
            dims,
            channels,
            data: vec![0.0; voxel_count(dims) * channels],
        }
    }

    pub fn from_data(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != voxel_count(dims) * channels {
            return Err(Error::Shape(format!(
                "volume {dims:?}x{channels} needs {} values, got {}",
                voxel_count(dims) * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature volume entry".into()));
        }
        Ok(VoxelFeatureVolume { dims, channels, data })
    }

    pub fn n_voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    #[inline]
    pub fn feature(&self, idx: VoxelIndex) -> &[f64] {
        self.feature_at(linear_index(self.dims, idx))
    }

    #[inline]
    pub fn feature_at(&self, lin: usize) -> &[f64] {
        &self.data[lin * self.channels..(lin + 1) * self.channels]
    }

    #[inline]
    pub fn feature_at_mut(&mut self, lin: usize) -> &mut [f64] {
        &mut self.data[lin * self.channels..(lin + 1) * self.channels]
    }

    /// Trilinear interpolation at `pos`, given in voxel-center coordinates
    /// (voxel `i`'s center sits at `i`). Out-of-range positions are clamped.
    pub fn trilinear_sample(&self, pos: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for (lin, w) in trilinear_weights(self.dims, pos) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.feature_at(lin)) {
                *o += w * v;
            }
        }
        out
    }
}

/// The eight `(linear index, weight)` pairs trilinear interpolation blends.
pub fn trilinear_weights(dims: [usize; 3], pos: &Vec3) -> [(usize, f64); 8] {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let p = if pos[a].is_nan() { 0.0 } else { pos[a].clamp(0.0, max) };
        if dims[a] == 1 {
            continue;
        }
        let i0 = (p.floor() as usize).min(dims[a] - 2);
        lo[a] = i0;
        hi[a] = i0 + 1;
        t[a] = p - i0 as f64;
    }
    let mut out = [(0usize, 0.0f64); 8];
    for (corner, slot) in out.iter_mut().enumerate() {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                idx[a] = hi[a];
                w *= t[a];
            } else {
                idx[a] = lo[a];
                w *= 1.0 - t[a];
            }
        }
        *slot = (linear_index(dims, idx), w);
    }
    out
}

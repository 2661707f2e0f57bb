//! Pinhole camera rig, LiDAR-to-image projection and bilinear feature-map
//! sampling. Projection is the only bridge between 3D points and image
//! features anywhere in the pipeline; no per-pixel depth is ever produced.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pointprep::ReferencePointSet;
use crate::{Error, Result, Vec3};

/// Points closer than this along the optical axis are treated as invisible.
pub const NEAR_PLANE: f64 = 1e-3;

pub type Pixel = Vector2<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Matrix3<f64>,
    /// World-to-camera rigid transform.
    pub extrinsics: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: String,
    width: usize,
    height: usize,
    intrinsics: Vec<f64>,
    extrinsics: Vec<f64>,
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        if r.intrinsics.len() != 9 || r.extrinsics.len() != 16 {
            return Err(Error::format("rig JSON", "intrinsics need 9 and extrinsics 16 numbers"));
        }
        let cam = CameraModel {
            id: r.id,
            width: r.width,
            height: r.height,
            intrinsics: Matrix3::from_row_slice(&r.intrinsics),
            extrinsics: Matrix4::from_row_slice(&r.extrinsics),
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        CameraRecord {
            id: c.id,
            width: c.width,
            height: c.height,
            intrinsics: c.intrinsics.transpose().as_slice().to_vec(),
            extrinsics: c.extrinsics.transpose().as_slice().to_vec(),
        }
    }
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, image `y` pointing along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: impl Into<String>,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let cam = CameraModel {
            id: id.into(),
            width,
            height,
            intrinsics: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            extrinsics: ext,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::Config(format!("camera {}: fx and fy must be positive", self.id)));
        }
        if k[(1, 0)] != 0.0 || k.row(2) != Matrix3::<f64>::identity().row(2) {
            return Err(Error::Config(format!("camera {}: intrinsics must be upper triangular with last row (0, 0, 1)", self.id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("camera {}: empty image", self.id)));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err < 1e-9) {
            return Err(Error::Config(format!("camera {}: rotation not orthonormal (err {err:e})", self.id)));
        }
        if self.extrinsics.row(3) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
            return Err(Error::Config(format!("camera {}: extrinsics bottom row must be (0, 0, 0, 1)", self.id)));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation() * world + self.translation()
    }

    /// Image-plane pixel and optical-axis depth, or `None` at or behind the
    /// near plane. The pixel is not bounds-checked.
    pub fn project_image(&self, world: &Vec3) -> Option<(Pixel, f64)> {
        let p = self.to_camera(world);
        if !(p.z > NEAR_PLANE) {
            return None;
        }
        let h = self.intrinsics * (p / p.z);
        Some((Vector2::new(h.x, h.y), p.z))
    }

    /// Inverse of [`CameraModel::project_image`].
    pub fn unproject(&self, pixel: &Pixel, depth: f64) -> Vec3 {
        let k_inv = self.intrinsics.try_inverse().expect("validated intrinsics are invertible");
        let p_cam = k_inv * Vector3::new(pixel.x, pixel.y, 1.0) * depth;
        self.rotation().transpose() * (p_cam - self.translation())
    }

    /// World-space unit ray through an image pixel, with its origin.
    pub fn pixel_ray(&self, pixel: &Pixel) -> (Vec3, Vec3) {
        let k_inv = self.intrinsics.try_inverse().expect("validated intrinsics are invertible");
        let d_cam = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        ((self.center()), (self.rotation().transpose() * d_cam).normalize())
    }
}

/// Projects a world point into a feature map of `map_size = (W^c, H^c)` laid
/// over this camera's image; `None` when behind the camera or off the map.
/// Pixel and texel centers sit at integer coordinates, so a map pooled with
/// stride `s` sees image pixel `u` at `(u + 0.5) / s - 0.5`.
pub fn project(point: &Vec3, cam: &CameraModel, map_size: (usize, usize)) -> Option<Pixel> {
    let (px, _) = cam.project_image(point)?;
    let (mw, mh) = map_size;
    let fm = Vector2::new(
        (px.x + 0.5) * mw as f64 / cam.width as f64 - 0.5,
        (px.y + 0.5) * mh as f64 / cam.height as f64 - 0.5,
    );
    let inside = fm.x >= 0.0 && fm.x <= (mw - 1) as f64 && fm.y >= 0.0 && fm.y <= (mh - 1) as f64;
    inside.then_some(fm)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub cameras: Vec<CameraModel>,
}

impl Rig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One image's features, `(y, x, c)` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub camera_id: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(camera_id: impl Into<String>, width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            camera_id: camera_id.into(),
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Four-neighbour bilinear interpolation, clamped to the map.
    pub fn bilinear(&self, pixel: &Pixel) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_acc(pixel, 1.0, &mut out);
        out
    }

    /// `out += scale · bilinear(pixel)`
    pub fn bilinear_acc(&self, pixel: &Pixel, scale: f64, out: &mut [f64]) {
        let (x0, x1, tx) = cell(pixel.x, self.width);
        let (y0, y1, ty) = cell(pixel.y, self.height);
        let taps = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ];
        for (x, y, w) in taps {
            let w = w * scale;
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.texel(x, y)) {
                *o += w * v;
            }
        }
    }

    /// Derivatives of [`FeatureMap::bilinear`] with respect to the pixel's x
    /// and y. On cell borders and clamp edges the value is the mean of the
    /// two one-sided derivatives (zero on a clamped side), which is what a
    /// central difference converges to.
    pub fn bilinear_grad(&self, pixel: &Pixel, dx: &mut [f64], dy: &mut [f64]) {
        dx.iter_mut().for_each(|v| *v = 0.0);
        dy.iter_mut().for_each(|v| *v = 0.0);
        for i in one_sided_cells(pixel.x, self.width).into_iter().flatten() {
            // slope across column i..i+1 at row-interpolated y
            let (y0, y1, ty) = cell(pixel.y, self.height);
            for (c, d) in dx.iter_mut().enumerate() {
                let g = |x: usize| (1.0 - ty) * self.texel(x, y0)[c] + ty * self.texel(x, y1)[c];
                *d += 0.5 * (g(i + 1) - g(i));
            }
        }
        for j in one_sided_cells(pixel.y, self.height).into_iter().flatten() {
            let (x0, x1, tx) = cell(pixel.x, self.width);
            for (c, d) in dy.iter_mut().enumerate() {
                let g = |y: usize| (1.0 - tx) * self.texel(x0, y)[c] + tx * self.texel(x1, y)[c];
                *d += 0.5 * (g(j + 1) - g(j));
            }
        }
    }
}

/// Clamped interpolation cell along one axis: `(lo, hi, t)`.
#[inline]
fn cell(coord: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let c = if coord.is_nan() { 0.0 } else { coord.clamp(0.0, (n - 1) as f64) };
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64)
}

/// Cells governing the right- and left-sided derivatives at `coord`.
#[inline]
fn one_sided_cells(coord: f64, n: usize) -> [Option<usize>; 2] {
    if n < 2 || !coord.is_finite() {
        return [None, None];
    }
    let max = (n - 1) as f64;
    let right = (coord >= 0.0 && coord < max).then(|| coord.floor() as usize);
    let left = (coord > 0.0 && coord <= max).then(|| coord.ceil() as usize - 1);
    [right, left]
}

/// Multi-view feature maps, one per rig camera and in rig order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSet {
    pub maps: Vec<FeatureMap>,
}

impl FeatureMapSet {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if let Some(first) = maps.first() {
            for m in &maps {
                if m.channels != first.channels {
                    return Err(Error::Shape("feature maps disagree on channel count".into()));
                }
                if m.data.len() != m.width * m.height * m.channels {
                    return Err(Error::Shape(format!("feature map {} has wrong data length", m.camera_id)));
                }
                if m.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("feature map {}", m.camera_id)));
                }
            }
        }
        Ok(FeatureMapSet { maps })
    }

    pub fn channels(&self) -> usize {
        self.maps.first().map_or(0, |m| m.channels)
    }

    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(FeatureMap::size).collect()
    }

    /// Mean feature over the cameras that see `point`, zeros if none do.
    pub fn mean_visible_feature(&self, point: &Vec3, rig: &[CameraModel]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        let mut hits = 0usize;
        for (cam, map) in rig.iter().zip(&self.maps) {
            if let Some(px) = project(point, cam, map.size()) {
                map.bilinear_acc(&px, 1.0, &mut out);
                hits += 1;
            }
        }
        if hits > 1 {
            let inv = 1.0 / hits as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }
}

/// One 2D reference point: a camera (rig position) and a feature-map pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub camera: usize,
    pub pixel: Pixel,
}

/// 2D reference points for every 3D reference point, mirroring the layout of
/// the [`ReferencePointSet`] it was built from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectedReference {
    /// `[voxel][point] -> projections` in rig order.
    pub voxels: Vec<Vec<Vec<Projection>>>,
}

impl ProjectedReference {
    pub fn visible_points(&self) -> usize {
        self.voxels.iter().flatten().filter(|p| !p.is_empty()).count()
    }
}

/// Projects every reference point into every camera's feature map.
pub fn project_all(
    refs: &ReferencePointSet,
    rig: &[CameraModel],
    map_sizes: &[(usize, usize)],
) -> Result<ProjectedReference> {
    if rig.is_empty() {
        return Err(Error::EmptyInput("camera rig"));
    }
    if rig.len() != map_sizes.len() {
        return Err(Error::Shape(format!("{} cameras but {} feature maps", rig.len(), map_sizes.len())));
    }
    let voxels = refs
        .voxels
        .par_iter()
        .map(|v| {
            v.points
                .iter()
                .map(|p| {
                    rig.iter()
                        .zip(map_sizes)
                        .enumerate()
                        .filter_map(|(ci, (cam, &size))| {
                            project(&p.position, cam, size).map(|pixel| Projection { camera: ci, pixel })
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ProjectedReference { voxels })
}

//! Deterministic synthetic box scenes: ground truth, LiDAR sweeps and
//! rendered camera images.

use std::path::Path;

use nalgebra::{Rotation3, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::CameraModel;
use crate::cloud::{LidarPoint, PointCloud};
use crate::encoders::RgbImage;
use crate::grid::{unlinear_index, GridConfig, OccupancyGrid};
use crate::rng::stream_rng;
use crate::{Error, Result, Vec3};

/// Containment slack for points on box faces.
const CONTAIN_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub class_id: u8,
    pub center: Vec3,
    /// Full edge lengths along the box's local axes.
    pub size: Vec3,
    /// Rotation about +z, radians.
    pub yaw: f64,
    pub albedo: [f64; 3],
}

impl BoxObject {
    fn to_local(&self, p: &Vec3) -> Vec3 {
        Rotation3::from_axis_angle(&Vec3::z_axis(), -self.yaw) * (p - self.center)
    }

    pub fn contains(&self, p: &Vec3, eps: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= self.size[a] / 2.0 + eps)
    }

    /// Distance from `p` to the box surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let l = self.to_local(p);
        let q: Vec3 = Vec3::from_fn(|a, _| l[a].abs() - self.size[a] / 2.0);
        let outside = q.map(|v| v.max(0.0)).norm();
        let inside = q.max().min(0.0);
        (outside + inside).abs()
    }

    /// Smallest `t >= 0` with `origin + t·dir` on the surface (slab test in
    /// the box frame).
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), -self.yaw);
        let o = rot * (origin - self.center);
        let d = rot * dir;
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let h = self.size[a] / 2.0;
            if d[a] == 0.0 {
                if o[a].abs() > h {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        if t0 > t1 || t1 < 0.0 {
            return None;
        }
        Some(if t0 >= 0.0 { t0 } else { t1 })
    }

    /// Axis-aligned bounds of the (possibly yawed) box.
    pub fn aabb(&self) -> (Vec3, Vec3) {
        let (c, s) = (self.yaw.cos().abs(), self.yaw.sin().abs());
        let half = Vec3::new(
            (c * self.size.x + s * self.size.y) / 2.0,
            (s * self.size.x + c * self.size.y) / 2.0,
            self.size.z / 2.0,
        );
        (self.center - half, self.center + half)
    }

    pub fn luminance(&self) -> f64 {
        0.2126 * self.albedo[0] + 0.7152 * self.albedo[1] + 0.0722 * self.albedo[2]
    }
}

fn default_elevation_min() -> f64 {
    -40.0
}
fn default_elevation_max() -> f64 {
    10.0
}
fn default_max_range() -> f64 {
    100.0
}

/// Spinning LiDAR: azimuth covers the full circle, elevation spans
/// `[elevation_min_deg, elevation_max_deg]` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub n_rays_azimuth: usize,
    pub n_rays_elevation: usize,
    pub origin: Vec3,
    pub noise_sigma: f64,
    #[serde(default = "default_elevation_min")]
    pub elevation_min_deg: f64,
    #[serde(default = "default_elevation_max")]
    pub elevation_max_deg: f64,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
}

impl LidarSpec {
    pub fn n_rays(&self) -> usize {
        self.n_rays_azimuth * self.n_rays_elevation
    }

    /// Unit direction of ray `i` (azimuth-major).
    pub fn ray(&self, i: usize) -> Vec3 {
        let (ia, ie) = (i / self.n_rays_elevation, i % self.n_rays_elevation);
        let az = std::f64::consts::TAU * ia as f64 / self.n_rays_azimuth as f64;
        let el = if self.n_rays_elevation == 1 {
            (self.elevation_min_deg + self.elevation_max_deg) / 2.0
        } else {
            self.elevation_min_deg
                + (self.elevation_max_deg - self.elevation_min_deg) * ie as f64 / (self.n_rays_elevation - 1) as f64
        }
        .to_radians();
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: GridConfig,
    pub n_class: usize,
    pub objects: Vec<BoxObject>,
    pub rig: Vec<CameraModel>,
    pub lidar: LidarSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(2..=256).contains(&self.n_class) {
            return Err(Error::Config(format!("n_class {} outside [2, 256]", self.n_class)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id == 0 || o.class_id as usize >= self.n_class {
                return Err(Error::LabelOutOfRange { label: o.class_id as usize, n_class: self.n_class });
            }
            if o.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("object {i}: box size must be positive")));
            }
            let (lo, hi) = o.aabb();
            let g = &self.grid;
            if (0..3).any(|a| hi[a] <= g.min_corner[a] || lo[a] >= g.max_corner[a]) {
                return Err(Error::Config(format!("object {i} does not intersect the grid")));
            }
        }
        if !(self.lidar.noise_sigma >= 0.0) {
            return Err(Error::Config("LiDAR noise_sigma must be non-negative".into()));
        }
        if self.lidar.n_rays() == 0 {
            return Err(Error::Config("LiDAR needs at least one ray".into()));
        }
        for cam in &self.rig {
            cam.validate()?;
        }
        Ok(())
    }

    /// Nearest hit along a ray; on equal range the later object wins.
    fn first_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(t) = o.intersect(origin, dir) {
                if best.is_none_or(|(_, bt)| t <= bt) {
                    best = Some((i, t));
                }
            }
        }
        best
    }
}

/// Fine-resolution ground truth: each fine voxel takes the class of the
/// last-listed object containing its center.
pub fn rasterize_gt(spec: &SceneSpec) -> OccupancyGrid {
    let g = &spec.grid;
    let dims = g.fine_dims();
    let mut out = OccupancyGrid::empty(dims, g.voxel_size, g.min_corner);
    out.labels = (0..out.labels.len())
        .into_par_iter()
        .map(|lin| {
            let c = out.voxel_center(unlinear_index(dims, lin));
            spec.objects
                .iter()
                .rev()
                .find(|o| o.contains(&c, CONTAIN_EPS))
                .map_or(0, |o| o.class_id)
        })
        .collect();
    out
}

/// One return per ray that hits a box within `max_range`, in ray order.
pub fn cast_lidar(spec: &SceneSpec) -> PointCloud {
    let l = &spec.lidar;
    let noise = Normal::new(0.0, l.noise_sigma.max(0.0)).expect("finite sigma");
    let points = (0..l.n_rays())
        .into_par_iter()
        .filter_map(|i| {
            let dir = l.ray(i);
            let (obj, t) = spec.first_hit(&l.origin, &dir)?;
            if t > l.max_range {
                return None;
            }
            let range = if l.noise_sigma > 0.0 {
                let mut rng = stream_rng(spec.seed, i as u64);
                t + noise.sample(&mut rng)
            } else {
                t
            };
            Some(LidarPoint {
                position: l.origin + dir * range,
                intensity: spec.objects[obj].luminance(),
            })
        })
        .collect();
    PointCloud::new(points)
}

/// One RGB image per camera: the nearest box's albedo scaled by
/// `1 / (1 + range)`, black where no box is hit.
pub fn render_views(spec: &SceneSpec) -> Vec<RgbImage> {
    spec.rig
        .iter()
        .map(|cam| {
            let data: Vec<f64> = (0..cam.height)
                .into_par_iter()
                .flat_map_iter(|y| {
                    (0..cam.width).flat_map(move |x| {
                        let (o, d) = cam.pixel_ray(&Vector2::new(x as f64, y as f64));
                        match spec.first_hit(&o, &d) {
                            Some((i, t)) => spec.objects[i].albedo.map(|a| a / (1.0 + t)),
                            None => [0.0; 3],
                        }
                    })
                })
                .collect();
            RgbImage { width: cam.width, height: cam.height, data }
        })
        .collect()
}

/// Generated sensor data, quantized to the on-disk precision (f32
/// positions, 8-bit colors) so saved datasets reload bit-identically.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub gt: OccupancyGrid,
    pub cloud: PointCloud,
    pub images: Vec<RgbImage>,
}

impl Scene {
    pub fn generate(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut cloud = cast_lidar(spec);
        for p in &mut cloud.points {
            p.position = p.position.map(|v| v as f32 as f64);
            p.intensity = p.intensity as f32 as f64;
        }
        let mut images = render_views(spec);
        for img in &mut images {
            img.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
        Ok(Scene {
            spec: spec.clone(),
            gt: rasterize_gt(spec),
            cloud,
            images,
        })
    }
}

impl Scene {
    /// Writes `scene.json`, `cloud.ocfp`, `gt.occg` and one `<camera id>.ppm`
    /// per camera into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec_path = dir.join("scene.json");
        std::fs::write(&spec_path, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(&spec_path, e))?;
        self.cloud.save_ocfp(&dir.join("cloud.ocfp"))?;
        self.gt.save(&dir.join("gt.occg"))?;
        for (cam, img) in self.spec.rig.iter().zip(&self.images) {
            if cam.id.is_empty() || !cam.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!("camera id {:?} is not usable as a file name", cam.id)));
            }
            img.save_ppm(&dir.join(format!("{}.ppm", cam.id)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("scene.json");
        let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: SceneSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        let images = spec
            .rig
            .iter()
            .map(|cam| RgbImage::load(&dir.join(format!("{}.ppm", cam.id))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            gt: OccupancyGrid::load(&dir.join("gt.occg"))?,
            cloud: PointCloud::load(&dir.join("cloud.ocfp"))?,
            images,
            spec,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    Small,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected tiny or small)"))),
        }
    }
}

struct PresetLayout {
    grid: GridConfig,
    n_class: usize,
    n_objects: usize,
    /// Camera azimuths in degrees; every camera sits outside the grid on a
    /// circle around its vertical axis and looks at `camera_target_z`.
    camera_azimuths: &'static [f64],
    camera_radius: f64,
    camera_z: f64,
    camera_target_z: f64,
}

impl Preset {
    fn layout(self) -> PresetLayout {
        match self {
            Preset::Tiny => PresetLayout {
                grid: GridConfig {
                    min_corner: Vec3::new(-4.0, -4.0, -2.0),
                    max_corner: Vec3::new(4.0, 4.0, 6.0),
                    voxel_size: 0.5,
                    stride: 2,
                },
                n_class: 3,
                n_objects: 2,
                camera_azimuths: &[0.0, 90.0],
                camera_radius: 6.5,
                camera_z: 4.5,
                camera_target_z: 0.5,
            },
            Preset::Small => PresetLayout {
                grid: GridConfig {
                    min_corner: Vec3::new(-8.0, -8.0, -4.0),
                    max_corner: Vec3::new(8.0, 8.0, 12.0),
                    voxel_size: 0.5,
                    stride: 2,
                },
                n_class: 5,
                n_objects: 6,
                camera_azimuths: &[0.0, 90.0, 180.0, 270.0],
                camera_radius: 12.0,
                camera_z: 6.0,
                camera_target_z: 1.0,
            },
        }
    }

    pub fn grid(self) -> GridConfig {
        self.layout().grid
    }

    pub fn n_class(self) -> usize {
        self.layout().n_class
    }

    /// The shipped fixture scene.
    pub fn fixture(self) -> SceneSpec {
        let objects = match self {
            Preset::Tiny => vec![
                aligned_box(&self.grid(), 1, [2, 9, 3], [7, 13, 7], PALETTE[0]),
                aligned_box(&self.grid(), 2, [9, 2, 3], [13, 6, 10], PALETTE[1]),
            ],
            Preset::Small => vec![
                aligned_box(&self.grid(), 1, [4, 18, 7], [12, 24, 11], PALETTE[0]),
                aligned_box(&self.grid(), 2, [19, 4, 7], [25, 9, 18], PALETTE[1]),
                aligned_box(&self.grid(), 3, [20, 20, 7], [22, 22, 12], PALETTE[2]),
                aligned_box(&self.grid(), 4, [5, 6, 7], [9, 8, 9], PALETTE[3]),
                aligned_box(&self.grid(), 1, [25, 15, 7], [29, 21, 10], [0.8, 0.3, 0.3]),
                aligned_box(&self.grid(), 3, [12, 3, 7], [13, 4, 14], [0.9, 0.8, 0.3]),
            ],
        };
        self.with_objects(0, objects)
    }

    /// A random layout with the preset's grid, rig and object count.
    pub fn random(self, seed: u64) -> SceneSpec {
        let lay = self.layout();
        let g = &lay.grid;
        let fd = g.fine_dims();
        let mut rng = stream_rng(seed, 0x5ce9e);
        let center_fine = [fd[0] / 2, fd[1] / 2];
        let floor = fd[2] * 7 / 32;
        let mut objects = Vec::with_capacity(lay.n_objects);
        while objects.len() < lay.n_objects {
            let ext = [rng.random_range(1..fd[0] / 4), rng.random_range(1..fd[1] / 4), rng.random_range(2..fd[2] / 3)];
            let lo = [
                rng.random_range(1..fd[0] - ext[0] - 1),
                rng.random_range(1..fd[1] - ext[1] - 1),
                floor,
            ];
            let hi = [lo[0] + ext[0], lo[1] + ext[1], lo[2] + ext[2]];
            // keep the sensor mast clear
            let covers_mast = (0..2).all(|a| lo[a] <= center_fine[a] + 1 && hi[a] + 1 >= center_fine[a]);
            if covers_mast {
                continue;
            }
            let class = rng.random_range(1..lay.n_class as u8);
            let base = PALETTE[(class as usize - 1) % PALETTE.len()];
            let albedo = base.map(|c: f64| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            objects.push(aligned_box(g, class, lo, hi, albedo));
        }
        self.with_objects(seed, objects)
    }

    fn with_objects(self, seed: u64, objects: Vec<BoxObject>) -> SceneSpec {
        let lay = self.layout();
        let g = lay.grid.clone();
        let mid = (g.min_corner + g.max_corner) / 2.0;
        let target = Vec3::new(mid.x, mid.y, lay.camera_target_z);
        let rig = lay
            .camera_azimuths
            .iter()
            .enumerate()
            .map(|(i, az)| {
                let a = az.to_radians();
                let eye = Vec3::new(
                    mid.x + lay.camera_radius * a.cos(),
                    mid.y + lay.camera_radius * a.sin(),
                    lay.camera_z,
                );
                CameraModel::look_at(format!("cam{i}"), 64, 48, 36.0, 36.0, eye, target, Vec3::z())
                    .expect("preset cameras are valid")
            })
            .collect();
        SceneSpec {
            seed,
            grid: g,
            n_class: lay.n_class,
            objects,
            rig,
            lidar: LidarSpec {
                n_rays_azimuth: 360,
                n_rays_elevation: 32,
                origin: mid,
                noise_sigma: 0.0,
                elevation_min_deg: default_elevation_min(),
                elevation_max_deg: default_elevation_max(),
                max_range: default_max_range(),
            },
        }
    }
}

/// Per-class base albedo; random layouts jitter around it so appearance
/// stays predictive of class.
const PALETTE: [[f64; 3]; 4] = [[0.9, 0.2, 0.2], [0.2, 0.4, 0.9], [0.9, 0.9, 0.2], [0.3, 0.9, 0.4]];

/// Axis-aligned box whose faces pass through fine-voxel centers `lo..=hi`
/// (inclusive fine indices), so every surface point's voxel center lies on
/// or inside the box.
pub fn aligned_box(grid: &GridConfig, class_id: u8, lo: [usize; 3], hi: [usize; 3], albedo: [f64; 3]) -> BoxObject {
    let s = grid.voxel_size;
    let at = |a: usize, i: usize| grid.min_corner[a] + (i as f64 + 0.5) * s;
    let lo_w = Vec3::from_fn(|a, _| at(a, lo[a]));
    let hi_w = Vec3::from_fn(|a, _| at(a, hi[a]));
    BoxObject {
        class_id,
        center: (lo_w + hi_w) / 2.0,
        size: hi_w - lo_w,
        yaw: 0.0,
        albedo,
    }
}

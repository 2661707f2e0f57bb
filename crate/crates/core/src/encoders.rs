//! Deterministic stand-ins for the LiDAR and image backbones. They produce
//! tanh-bounded features with the voxel and multi-view shapes the fusion
//! stage expects, and are invariant to point order inside a voxel.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{FeatureMap, FeatureMapSet};
use crate::cloud::PointCloud;
use crate::grid::{linear_index, GridConfig, VoxelBin, VoxelFeatureVolume};
use crate::linalg::Mat;
use crate::rng::stream_rng;
use crate::{Error, Result};

/// RGB image with channel values in `[0, 1]`, `(y, x, rgb)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    width: usize,
    height: usize,
}

impl RgbImage {
    pub fn black(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::format("RGB", format!("expected {} bytes, got {}", width * height * 3, bytes.len())));
        }
        Ok(RgbImage {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Writes binary PPM (P6).
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .expect("buffer sized from dimensions");
        buf.save_with_format(path, image::ImageFormat::Pnm)
            .map_err(|e| Error::format("PPM", format!("{}: {e}", path.display())))
    }

    /// Reads a PPM image, or a flat `.rgb` byte file next to a `.json` sidecar
    /// holding `{"width", "height"}`.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "rgb") {
            let sidecar = path.with_extension("json");
            let meta: RawSidecar = serde_json::from_str(
                &std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?,
            )?;
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            return Self::from_bytes(meta.width, meta.height, &bytes);
        }
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::format("PPM", format!("{}: {e}", path.display())))?
            .to_rgb8();
        Self::from_bytes(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub channels: usize,
    pub image_stride: usize,
    /// `C x 4`: voxel-relative xyz and intensity to features.
    pub point_embed: Mat,
    /// `C x C`
    pub voxel_mix: Mat,
    /// `C x 3`
    pub pixel_embed: Mat,
    pub seed: u64,
}

impl EncoderParams {
    pub fn seeded(channels: usize, image_stride: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x0e5c);
        EncoderParams {
            channels,
            image_stride,
            point_embed: Mat::uniform(channels, 4, 2.0, &mut rng),
            voxel_mix: Mat::uniform(channels, channels, 2.0 / (channels as f64).sqrt(), &mut rng),
            pixel_embed: Mat::uniform(channels, 3, 3.0, &mut rng),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let shapes = [
            ("point_embed", &self.point_embed, (c, 4)),
            ("voxel_mix", &self.voxel_mix, (c, c)),
            ("pixel_embed", &self.pixel_embed, (c, 3)),
        ];
        for (name, m, want) in shapes {
            if (m.rows, m.cols) != want || m.data.len() != want.0 * want.1 {
                return Err(Error::Shape(format!("{name} should be {}x{}", want.0, want.1)));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if self.image_stride == 0 {
            return Err(Error::Config("image_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Voxelized LiDAR features on the coarse grid. Each occupied voxel averages
/// `point_embed · (x_rel, y_rel, z_rel, intensity)` over its raw points, where
/// the offsets are relative to the voxel center in units of the voxel edge,
/// then applies `voxel_mix` and `tanh`. Voxels without raw points stay zero.
pub fn encode_lidar(
    bins: &[VoxelBin],
    cloud: &PointCloud,
    grid: &GridConfig,
    params: &EncoderParams,
) -> Result<VoxelFeatureVolume> {
    params.validate()?;
    let dims = grid.coarse_dims();
    let c = params.channels;
    let cell = grid.coarse_voxel_size();
    let per_voxel: Vec<(usize, Vec<f64>)> = bins
        .par_iter()
        .filter(|b| !b.is_empty())
        .map(|bin| {
            let center = grid.voxel_center(bin.voxel_index);
            let mut acc = vec![0.0; c];
            let mut emb = vec![0.0; c];
            for &pi in &bin.point_indices {
                let p = &cloud.points[pi];
                let rel = (p.position - center) / cell;
                params.point_embed.matvec_into(&[rel.x, rel.y, rel.z, p.intensity], &mut emb);
                acc.iter_mut().zip(&emb).for_each(|(a, e)| *a += e);
            }
            let inv = 1.0 / bin.len() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            let feat = params.voxel_mix.matvec(&acc).into_iter().map(f64::tanh).collect();
            (linear_index(dims, bin.voxel_index), feat)
        })
        .collect();
    let mut vol = VoxelFeatureVolume::zeros(dims, c);
    for (lin, feat) in per_voxel {
        vol.feature_at_mut(lin).copy_from_slice(&feat);
    }
    Ok(vol)
}

/// Multi-view image features: `image_stride` average pooling, then a per-pixel
/// `tanh(pixel_embed · rgb)`.
pub fn encode_images(images: &[RgbImage], camera_ids: &[String], params: &EncoderParams) -> Result<FeatureMapSet> {
    params.validate()?;
    if images.len() != camera_ids.len() {
        return Err(Error::Shape(format!("{} images for {} cameras", images.len(), camera_ids.len())));
    }
    if let Some(first) = images.first() {
        if images.iter().any(|im| (im.width, im.height) != (first.width, first.height)) {
            return Err(Error::Shape("all images must share one size".into()));
        }
    }
    let s = params.image_stride;
    let maps = images
        .par_iter()
        .zip(camera_ids)
        .map(|(img, id)| {
            if img.width % s != 0 || img.height % s != 0 {
                return Err(Error::Shape(format!(
                    "image {}x{} not divisible by stride {s}",
                    img.width, img.height
                )));
            }
            let (w, h) = (img.width / s, img.height / s);
            let mut map = FeatureMap::zeros(id.clone(), w, h, params.channels);
            let inv = 1.0 / (s * s) as f64;
            for y in 0..h {
                for x in 0..w {
                    let mut rgb = [0.0; 3];
                    for dy in 0..s {
                        for dx in 0..s {
                            let p = img.pixel(x * s + dx, y * s + dy);
                            (0..3).for_each(|k| rgb[k] += p[k]);
                        }
                    }
                    rgb.iter_mut().for_each(|v| *v *= inv);
                    let texel = map.texel_mut(x, y);
                    params.pixel_embed.matvec_into(&rgb, texel);
                    texel.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            Ok(map)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMapSet::new(maps)
}

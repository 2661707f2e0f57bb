//! Point-to-point LiDAR/camera fusion.
//!
//! Each 3D reference point forms a query from its voxel's LiDAR feature and
//! its normalized coordinates. Deformable attention samples the image feature
//! map around each of the point's projections:
//!
//! ```text
//! DeformAttn(q, p, x) = sum_m W_m sum_k A_mk * W'_m x(p + dp_mk)
//! ```
//!
//! with `dp = offset_gen · q` and `A_m = softmax_k(weight_gen · q)`. The voxel
//! feature is the mean over visible reference points of the mean over each
//! point's projections. Voxels no camera sees fall back to
//! `fallback · F_L[V]`.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{FeatureMap, FeatureMapSet, Pixel, ProjectedReference};
use crate::grid::{linear_index, voxel_count, GridConfig, VoxelFeatureVolume};
use crate::linalg::{dot, softmax, softmax_backward, Mat};
use crate::pointprep::ReferencePointSet;
use crate::rng::stream_rng;
use crate::{Error, Result, Vec3};

/// Number of normalized coordinates appended to every query.
pub const COORD_DIMS: usize = 3;

/// Voxels per gradient-reduction chunk; fixed so reductions do not depend on
/// the worker count.
const REDUCE_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub channels: usize,
    pub n_heads: usize,
    pub n_keys: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            channels: 16,
            n_heads: 2,
            n_keys: 4,
            seed: 0,
        }
    }
}

/// `[voxel LiDAR feature ‖ normalized xyz]`
#[derive(Clone, Debug, PartialEq)]
pub struct Query(pub Vec<f64>);

pub fn build_query(voxel_feature: &[f64], point: &Vec3, grid: &GridConfig) -> Query {
    let n = grid.normalize(point);
    let mut q = Vec::with_capacity(voxel_feature.len() + COORD_DIMS);
    q.extend_from_slice(voxel_feature);
    q.extend_from_slice(&[n.x, n.y, n.z]);
    Query(q)
}

/// Learnable fusion parameters. The same struct holds their gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub channels: usize,
    pub n_heads: usize,
    pub n_keys: usize,
    /// `W_m`, one `C x C` per head.
    pub w_out: Vec<Mat>,
    /// `W'_m`, one `C x C` per head.
    pub w_value: Vec<Mat>,
    /// `(H·K·2) x (C+3)`; rows `(m·K + k)·2 + {0: x, 1: y}`.
    pub offset_gen: Mat,
    /// `(H·K) x (C+3)`; row `m·K + k`.
    pub weight_gen: Mat,
    /// `C x C` map for voxels no camera sees.
    pub fallback: Mat,
}

impl AttentionParams {
    /// Offsets and attention logits start at zero, so every head begins by
    /// averaging uniformly at the projected point.
    pub fn init(cfg: &FusionConfig) -> Self {
        let c = cfg.channels;
        let hk = cfg.n_heads * cfg.n_keys;
        let mut rng = stream_rng(cfg.seed, 0xf05e);
        let w_out = (0..cfg.n_heads).map(|_| Mat::uniform(c, c, 0.1, &mut rng)).collect();
        let w_value = (0..cfg.n_heads).map(|_| Mat::uniform(c, c, 0.1, &mut rng)).collect();
        let fallback = Mat::uniform(c, c, 0.1, &mut rng);
        AttentionParams {
            channels: c,
            n_heads: cfg.n_heads,
            n_keys: cfg.n_keys,
            w_out,
            w_value,
            offset_gen: Mat::zeros(hk * 2, c + COORD_DIMS),
            weight_gen: Mat::zeros(hk, c + COORD_DIMS),
            fallback,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (m, w) in self.w_out.iter().enumerate() {
            out.push((format!("head{m}.w_out"), w));
        }
        for (m, w) in self.w_value.iter().enumerate() {
            out.push((format!("head{m}.w_value"), w));
        }
        out.push(("offset_gen".into(), &self.offset_gen));
        out.push(("weight_gen".into(), &self.weight_gen));
        out.push(("fallback".into(), &self.fallback));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (m, w) in self.w_out.iter_mut().enumerate() {
            out.push((format!("head{m}.w_out"), w));
        }
        for (m, w) in self.w_value.iter_mut().enumerate() {
            out.push((format!("head{m}.w_value"), w));
        }
        out.push(("offset_gen".into(), &mut self.offset_gen));
        out.push(("weight_gen".into(), &mut self.weight_gen));
        out.push(("fallback".into(), &mut self.fallback));
        out
    }

    pub fn axpy(&mut self, alpha: f64, other: &AttentionParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let hk = self.n_heads * self.n_keys;
        let ok = self.n_heads >= 1
            && self.n_keys >= 1
            && self.w_out.len() == self.n_heads
            && self.w_value.len() == self.n_heads
            && self.w_out.iter().chain(&self.w_value).all(|w| (w.rows, w.cols) == (c, c))
            && (self.offset_gen.rows, self.offset_gen.cols) == (hk * 2, c + COORD_DIMS)
            && (self.weight_gen.rows, self.weight_gen.cols) == (hk, c + COORD_DIMS)
            && (self.fallback.rows, self.fallback.cols) == (c, c);
        if !ok {
            return Err(Error::Shape("attention parameter shapes inconsistent".into()));
        }
        if let Some((name, _)) = self.tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("attention parameter {name}")));
        }
        Ok(())
    }
}

/// Intermediate values of one deformable-attention evaluation.
struct AttnTrace {
    /// `H·K` sampling positions.
    positions: Vec<Pixel>,
    /// Softmaxed weights, `H·K`.
    attn: Vec<f64>,
    /// Sampled features, `H·K x C`.
    samples: Vec<f64>,
    /// `sum_k A_mk x(·)`, `H x C`.
    pooled: Vec<f64>,
    /// `W'_m pooled_m`, `H x C`.
    values: Vec<f64>,
    out: Vec<f64>,
}

fn attn_forward(q: &Query, p: &Pixel, map: &FeatureMap, params: &AttentionParams) -> AttnTrace {
    let (c, h, k) = (params.channels, params.n_heads, params.n_keys);
    let offsets = params.offset_gen.matvec(&q.0);
    let logits = params.weight_gen.matvec(&q.0);
    let mut attn = Vec::with_capacity(h * k);
    for m in 0..h {
        attn.extend(softmax(&logits[m * k..(m + 1) * k]));
    }
    let positions: Vec<Pixel> = (0..h * k)
        .map(|j| p + Vector2::new(offsets[2 * j], offsets[2 * j + 1]))
        .collect();
    let mut samples = vec![0.0; h * k * c];
    let mut pooled = vec![0.0; h * c];
    for j in 0..h * k {
        let s = &mut samples[j * c..(j + 1) * c];
        map.bilinear_acc(&positions[j], 1.0, s);
        let m = j / k;
        for (pv, sv) in pooled[m * c..(m + 1) * c].iter_mut().zip(s.iter()) {
            *pv += attn[j] * sv;
        }
    }
    let mut values = vec![0.0; h * c];
    let mut out = vec![0.0; c];
    let mut tmp = vec![0.0; c];
    for m in 0..h {
        let v = &mut values[m * c..(m + 1) * c];
        params.w_value[m].matvec_into(&pooled[m * c..(m + 1) * c], v);
        params.w_out[m].matvec_into(v, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
    }
    AttnTrace {
        positions,
        attn,
        samples,
        pooled,
        values,
        out,
    }
}

/// Deformable attention of one query around pixel `p_q` of one feature map.
pub fn deform_attn(q: &Query, p_q: &Pixel, map: &FeatureMap, params: &AttentionParams) -> Vec<f64> {
    attn_forward(q, p_q, map, params).out
}

/// Accumulates into `grads` the parameter gradient of `<upstream, deform_attn(q, p, map)>`.
pub fn deform_attn_backward(
    q: &Query,
    p: &Pixel,
    map: &FeatureMap,
    params: &AttentionParams,
    upstream: &[f64],
    grads: &mut AttentionParams,
) {
    let (c, h, k) = (params.channels, params.n_heads, params.n_keys);
    let tr = attn_forward(q, p, map, params);
    let mut d_logits = vec![0.0; h * k];
    let mut d_offsets = vec![0.0; h * k * 2];
    let mut u = vec![0.0; c];
    let mut d_pooled = vec![0.0; c];
    let mut d_attn = vec![0.0; k];
    let mut gx = vec![0.0; c];
    let mut gy = vec![0.0; c];
    for m in 0..h {
        let pooled = &tr.pooled[m * c..(m + 1) * c];
        grads.w_out[m].add_outer(1.0, upstream, &tr.values[m * c..(m + 1) * c]);
        u.iter_mut().for_each(|v| *v = 0.0);
        params.w_out[m].matvec_t_acc(upstream, &mut u);
        grads.w_value[m].add_outer(1.0, &u, pooled);
        d_pooled.iter_mut().for_each(|v| *v = 0.0);
        params.w_value[m].matvec_t_acc(&u, &mut d_pooled);
        for kk in 0..k {
            let j = m * k + kk;
            let s = &tr.samples[j * c..(j + 1) * c];
            d_attn[kk] = dot(&d_pooled, s);
            map.bilinear_grad(&tr.positions[j], &mut gx, &mut gy);
            let a = tr.attn[j];
            d_offsets[2 * j] = a * dot(&d_pooled, &gx);
            d_offsets[2 * j + 1] = a * dot(&d_pooled, &gy);
        }
        softmax_backward(&tr.attn[m * k..(m + 1) * k], &d_attn, &mut d_logits[m * k..(m + 1) * k]);
    }
    grads.weight_gen.add_outer(1.0, &d_logits, &q.0);
    grads.offset_gen.add_outer(1.0, &d_offsets, &q.0);
}

/// One query evaluated at one projection.
#[derive(Clone, Debug)]
struct TapeTerm {
    query: Query,
    pixel: Pixel,
    camera: usize,
    weight: f64,
}

/// Forward state retained for [`fusion_backward`].
#[derive(Clone, Debug, Default)]
pub struct FusionTape {
    dims: [usize; 3],
    channels: usize,
    /// Attention voxels in ascending linear order.
    attention: Vec<(usize, Vec<TapeTerm>)>,
    /// Voxels that took the fallback path, ascending.
    fallback: Vec<usize>,
    lidar: Option<VoxelFeatureVolume>,
}

impl FusionTape {
    pub fn is_recorded(&self) -> bool {
        self.lidar.is_some()
    }

    pub fn fallback_voxels(&self) -> &[usize] {
        &self.fallback
    }
}

pub struct FusionOutput {
    pub volume: VoxelFeatureVolume,
    pub tape: FusionTape,
}

fn check_shapes(
    f_l: &VoxelFeatureVolume,
    maps: &FeatureMapSet,
    refs: &ReferencePointSet,
    proj: &ProjectedReference,
    grid: &GridConfig,
    params: &AttentionParams,
) -> Result<()> {
    params.validate()?;
    if f_l.dims != grid.coarse_dims() || refs.dims != f_l.dims {
        return Err(Error::Shape(format!(
            "LiDAR volume {:?}, reference set {:?} and grid {:?} disagree",
            f_l.dims,
            refs.dims,
            grid.coarse_dims()
        )));
    }
    if f_l.channels != params.channels || (!maps.maps.is_empty() && maps.channels() != params.channels) {
        return Err(Error::Shape(format!(
            "channels: LiDAR {}, images {}, attention {}",
            f_l.channels,
            maps.channels(),
            params.channels
        )));
    }
    if proj.voxels.len() != refs.voxels.len()
        || proj.voxels.iter().zip(&refs.voxels).any(|(p, r)| p.len() != r.points.len())
    {
        return Err(Error::Shape("projections were not built from these reference points".into()));
    }
    if proj.voxels.iter().flatten().flatten().any(|p| p.camera >= maps.maps.len()) {
        return Err(Error::Shape("projection references a missing feature map".into()));
    }
    Ok(())
}

/// Fuses LiDAR voxel features with multi-view image features into the
/// coarse multi-modal volume `F^V`.
pub fn occ_fuse(
    f_l: &VoxelFeatureVolume,
    maps: &FeatureMapSet,
    refs: &ReferencePointSet,
    proj: &ProjectedReference,
    grid: &GridConfig,
    params: &AttentionParams,
) -> Result<FusionOutput> {
    check_shapes(f_l, maps, refs, proj, grid, params)?;
    let dims = f_l.dims;
    let c = params.channels;

    let attended: Vec<Option<(usize, Vec<f64>, Vec<TapeTerm>)>> = refs
        .voxels
        .par_iter()
        .zip(&proj.voxels)
        .map(|(vox, vproj)| {
            let lin = linear_index(dims, vox.voxel_index);
            let visible = vproj.iter().filter(|p| !p.is_empty()).count();
            if visible == 0 {
                return None;
            }
            let feat = f_l.feature_at(lin);
            let mut acc = vec![0.0; c];
            let mut point_acc = vec![0.0; c];
            let mut terms = Vec::new();
            for (pt, projections) in vox.points.iter().zip(vproj) {
                if projections.is_empty() {
                    continue;
                }
                let q = build_query(feat, &pt.position, grid);
                point_acc.iter_mut().for_each(|v| *v = 0.0);
                for pr in projections {
                    let out = deform_attn(&q, &pr.pixel, &maps.maps[pr.camera], params);
                    point_acc.iter_mut().zip(&out).for_each(|(a, o)| *a += o);
                    terms.push(TapeTerm {
                        query: q.clone(),
                        pixel: pr.pixel,
                        camera: pr.camera,
                        weight: 1.0 / (projections.len() * visible) as f64,
                    });
                }
                let inv = 1.0 / projections.len() as f64;
                acc.iter_mut().zip(&point_acc).for_each(|(a, p)| *a += p * inv);
            }
            let inv = 1.0 / visible as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            Some((lin, acc, terms))
        })
        .collect();

    let mut volume = VoxelFeatureVolume::zeros(dims, c);
    let mut covered = vec![false; voxel_count(dims)];
    let mut attention = Vec::new();
    for (lin, feat, terms) in attended.into_iter().flatten() {
        volume.feature_at_mut(lin).copy_from_slice(&feat);
        covered[lin] = true;
        attention.push((lin, terms));
    }
    let fallback: Vec<usize> = (0..voxel_count(dims)).filter(|&l| !covered[l]).collect();
    for &lin in &fallback {
        let out = params.fallback.matvec(f_l.feature_at(lin));
        volume.feature_at_mut(lin).copy_from_slice(&out);
    }
    Ok(FusionOutput {
        volume,
        tape: FusionTape {
            dims,
            channels: c,
            attention,
            fallback,
            lidar: Some(f_l.clone()),
        },
    })
}

/// Exact gradients of `<upstream, F^V>` with respect to every attention
/// parameter, given the tape from the matching [`occ_fuse`] call.
pub fn fusion_backward(
    upstream: &VoxelFeatureVolume,
    tape: &FusionTape,
    maps: &FeatureMapSet,
    params: &AttentionParams,
) -> Result<AttentionParams> {
    let lidar = tape.lidar.as_ref().ok_or(Error::MissingCache)?;
    if upstream.dims != tape.dims || upstream.channels != tape.channels || params.channels != tape.channels {
        return Err(Error::Shape("upstream gradient does not match the fused volume".into()));
    }
    let partials: Vec<AttentionParams> = tape
        .attention
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut scaled = vec![0.0; params.channels];
            for (lin, terms) in chunk {
                let up = upstream.feature_at(*lin);
                if up.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for t in terms {
                    scaled.iter_mut().zip(up).for_each(|(s, u)| *s = u * t.weight);
                    deform_attn_backward(&t.query, &t.pixel, &maps.maps[t.camera], params, &scaled, &mut g);
                }
            }
            g
        })
        .collect();
    let mut grads = params.zeros_like();
    for p in &partials {
        grads.axpy(1.0, p);
    }
    for &lin in &tape.fallback {
        grads.fallback.add_outer(1.0, upstream.feature_at(lin), lidar.feature_at(lin));
    }
    Ok(grads)
}

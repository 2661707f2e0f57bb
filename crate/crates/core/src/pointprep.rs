//! Per-voxel reference point preparation: sparse voxels are padded with
//! uniformly generated synthetic points, dense voxels are thinned with
//! farthest point sampling, and everything in between is kept verbatim.

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{linear_index, unlinear_index, voxel_count, GridConfig, VoxelBin, VoxelIndex};
use crate::rng::{stream_rng, StreamRng};
use crate::{Error, Result, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillScope {
    NonEmptyOnly,
    AllVoxels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Voxels with at most `tau` raw points are padded.
    pub tau: usize,
    /// Target count; voxels above it are reduced with FPS.
    pub theta: usize,
    pub seed: u64,
    pub fill_scope: FillScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            tau: 5,
            theta: 20,
            seed: 0,
            fill_scope: FillScope::AllVoxels,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta <= self.tau {
            return Err(Error::Config(format!(
                "theta ({}) must exceed tau ({})",
                self.theta, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Raw { index: usize },
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefPoint {
    pub position: Vec3,
    pub source: PointSource,
}

impl RefPoint {
    pub fn raw_index(&self) -> Option<usize> {
        match self.source {
            PointSource::Raw { index } => Some(index),
            PointSource::Synthetic => None,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.source == PointSource::Synthetic
    }
}

/// Which preprocessing branch a voxel took.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Padded,
    Kept,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelRefs {
    pub voxel_index: VoxelIndex,
    pub raw_count: usize,
    pub branch: Branch,
    /// Canonical order: raw survivors by ascending raw index, then synthetic
    /// points by ascending (x, y, z).
    pub points: Vec<RefPoint>,
}

impl VoxelRefs {
    /// Restores the canonical point order.
    pub fn canonicalize(&mut self) {
        self.points.sort_by(canonical_cmp);
    }
}

fn canonical_cmp(a: &RefPoint, b: &RefPoint) -> std::cmp::Ordering {
    match (a.raw_index(), b.raw_index()) {
        (Some(i), Some(j)) => i.cmp(&j),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a
            .position
            .x
            .total_cmp(&b.position.x)
            .then(a.position.y.total_cmp(&b.position.y))
            .then(a.position.z.total_cmp(&b.position.z)),
    }
}

/// The 3D reference points of every processed voxel, in ascending linear
/// voxel order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferencePointSet {
    pub dims: [usize; 3],
    pub voxels: Vec<VoxelRefs>,
}

impl ReferencePointSet {
    pub fn total_points(&self) -> usize {
        self.voxels.iter().map(|v| v.points.len()).sum()
    }

    pub fn synthetic_points(&self) -> usize {
        self.voxels
            .iter()
            .flat_map(|v| &v.points)
            .filter(|p| p.is_synthetic())
            .count()
    }

    pub fn branch_count(&self, branch: Branch) -> usize {
        self.voxels.iter().filter(|v| v.branch == branch).count()
    }
}

/// Runs the three-way densify / keep / reduce rule over the binned cloud.
pub fn preprocess(
    bins: &[VoxelBin],
    cloud: &[Vec3],
    grid: &GridConfig,
    cfg: &PreprocessConfig,
) -> Result<ReferencePointSet> {
    cfg.validate()?;
    let dims = grid.coarse_dims();
    let mut keyed: Vec<(usize, &VoxelBin)> = bins
        .iter()
        .map(|b| (linear_index(dims, b.voxel_index), b))
        .collect();
    keyed.sort_by_key(|k| k.0);
    if keyed.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Shape("duplicate voxel in bin list".into()));
    }
    if let Some(&bad) = bins.iter().flat_map(|b| &b.point_indices).find(|&&i| i >= cloud.len()) {
        return Err(Error::Shape(format!("bin references point {bad} beyond cloud of {}", cloud.len())));
    }

    let targets: Vec<(usize, Option<&VoxelBin>)> = match cfg.fill_scope {
        FillScope::NonEmptyOnly => keyed.iter().map(|&(lin, b)| (lin, Some(b))).collect(),
        FillScope::AllVoxels => {
            let mut it = keyed.iter().peekable();
            (0..voxel_count(dims))
                .map(|lin| match it.peek() {
                    Some(&&(l, b)) if l == lin => {
                        it.next();
                        (lin, Some(b))
                    }
                    _ => (lin, None),
                })
                .collect()
        }
    };

    let voxels = targets
        .into_par_iter()
        .map(|(lin, bin)| {
            let idx = unlinear_index(dims, lin);
            let raw: &[usize] = bin.map_or(&[], |b| &b.point_indices);
            let mut rng = stream_rng(cfg.seed, lin as u64);
            process_voxel(idx, raw, cloud, grid, cfg, &mut rng)
        })
        .collect();

    Ok(ReferencePointSet { dims, voxels })
}

fn process_voxel(
    idx: VoxelIndex,
    raw: &[usize],
    cloud: &[Vec3],
    grid: &GridConfig,
    cfg: &PreprocessConfig,
    rng: &mut StreamRng,
) -> VoxelRefs {
    let n = raw.len();
    let as_raw = |i: usize| RefPoint {
        position: cloud[i],
        source: PointSource::Raw { index: i },
    };
    let (branch, points) = if n <= cfg.tau {
        let (lo, hi) = grid.voxel_bounds(idx);
        let mut pts: Vec<RefPoint> = raw.iter().map(|&i| as_raw(i)).collect();
        pts.extend(uniform_fill(&lo, &hi, cfg.theta - n, rng).into_iter().map(|p| RefPoint {
            position: p,
            source: PointSource::Synthetic,
        }));
        (Branch::Padded, pts)
    } else if n <= cfg.theta {
        (Branch::Kept, raw.iter().map(|&i| as_raw(i)).collect())
    } else {
        let local: Vec<Vec3> = raw.iter().map(|&i| cloud[i]).collect();
        let start = rng.random_range(0..n);
        let chosen = fps(&local, cfg.theta, start).expect("non-empty voxel with valid start");
        (Branch::Sampled, chosen.into_iter().map(|j| as_raw(raw[j])).collect())
    };
    let mut refs = VoxelRefs {
        voxel_index: idx,
        raw_count: n,
        branch,
        points,
    };
    refs.canonicalize();
    refs
}

/// `count` points i.i.d. uniform in the half-open box `[lo, hi)`.
pub fn uniform_fill(lo: &Vec3, hi: &Vec3, count: usize, rng: &mut StreamRng) -> Vec<Vec3> {
    (0..count)
        .map(|_| {
            let mut p = Vector3::zeros();
            for a in 0..3 {
                let u: f64 = rng.random();
                let v = lo[a] + u * (hi[a] - lo[a]);
                p[a] = if v < hi[a] { v } else { hi[a].next_down() };
            }
            p
        })
        .collect()
}

#[inline]
fn distance(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
}

/// Greedy farthest point sampling from `start`: each step adds the point with
/// the largest Euclidean distance to the selected set, lowest index on ties.
/// Returns the selected indices in ascending order.
pub fn fps(points: &[Vec3], k: usize, start: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("farthest point sampling needs at least one point"));
    }
    if k == 0 {
        return Err(Error::Config("fps: k must be at least 1".into()));
    }
    if start >= points.len() {
        return Err(Error::Config(format!("fps: start {start} out of range for {} points", points.len())));
    }
    let target = k.min(points.len());
    let mut selected = vec![false; points.len()];
    let mut nearest: Vec<f64> = points.iter().map(|p| distance(p, &points[start])).collect();
    selected[start] = true;
    let mut out = vec![start];
    while out.len() < target {
        let mut best: Option<usize> = None;
        for (j, &d) in nearest.iter().enumerate() {
            if selected[j] {
                continue;
            }
            if best.is_none_or(|b| d > nearest[b]) {
                best = Some(j);
            }
        }
        let alpha = best.expect("unselected points remain");
        selected[alpha] = true;
        out.push(alpha);
        let pa = points[alpha];
        for (j, d) in nearest.iter_mut().enumerate() {
            if !selected[j] {
                *d = d.min(distance(&points[j], &pa));
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

//! Classification heads, the entropy gate and coarse-to-fine decoding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{CameraModel, FeatureMapSet};
use crate::grid::{
    linear_index, split_voxel, unlinear_index, voxel_count, FineCell, GridConfig, OccupancyGrid, VoxelFeatureVolume,
    VoxelIndex,
};
use crate::linalg::{ceil_count, softmax, Mat};
use crate::rng::stream_rng;
use crate::{Error, Result, Vec3};

/// Affine map `weight · x + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    /// Column vector, `out x 1`.
    pub bias: Mat,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Mat::zeros(out, inp),
            bias: Mat::zeros(out, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!("head expects {} inputs, got {}", self.in_dim(), x.len())));
        }
        let mut y = self.weight.matvec(x);
        y.iter_mut().zip(&self.bias.data).for_each(|(v, b)| *v += b);
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    /// `C -> N_class`
    pub coarse: Linear,
    /// `2C -> N_class`, fed `trilinear(F^V) ‖ mean image feature`.
    pub fine: Linear,
}

impl Heads {
    pub fn init(channels: usize, n_class: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0x4ead);
        let scale = 1.0 / (channels as f64).sqrt();
        Heads {
            coarse: Linear {
                weight: Mat::uniform(n_class, channels, scale, &mut rng),
                bias: Mat::zeros(n_class, 1),
            },
            fine: Linear {
                weight: Mat::uniform(n_class, 2 * channels, scale, &mut rng),
                bias: Mat::zeros(n_class, 1),
            },
        }
    }

    pub fn n_class(&self) -> usize {
        self.coarse.out_dim()
    }

    pub fn channels(&self) -> usize {
        self.coarse.in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Heads {
            coarse: Linear::zeros(self.coarse.out_dim(), self.coarse.in_dim()),
            fine: Linear::zeros(self.fine.out_dim(), self.fine.in_dim()),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![
            ("coarse.weight".into(), &self.coarse.weight),
            ("coarse.bias".into(), &self.coarse.bias),
            ("fine.weight".into(), &self.fine.weight),
            ("fine.bias".into(), &self.fine.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![
            ("coarse.weight".into(), &mut self.coarse.weight),
            ("coarse.bias".into(), &mut self.coarse.bias),
            ("fine.weight".into(), &mut self.fine.weight),
            ("fine.bias".into(), &mut self.fine.bias),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c) = (self.n_class(), self.channels());
        if n < 2
            || self.coarse.bias.rows != n
            || (self.fine.weight.rows, self.fine.weight.cols) != (n, 2 * c)
            || self.fine.bias.rows != n
        {
            return Err(Error::Shape("classification head shapes inconsistent".into()));
        }
        if let Some((name, _)) = self.tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite(format!("head parameter {name}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn uniform(n: usize) -> Self {
        ClassDistribution {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_valid(&self) -> bool {
        self.probs.iter().all(|p| p.is_finite() && *p >= 0.0) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

pub fn classify(feature: &[f64], head: &Linear) -> Result<ClassDistribution> {
    Ok(ClassDistribution {
        probs: softmax(&head.forward(feature)?),
    })
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(d: &ClassDistribution) -> f64 {
    -d.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Which coarse voxels compete for the refinement budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankScope {
    /// Voxels whose coarse argmax is non-empty.
    #[default]
    Occupied,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub delta: f64,
    pub split_factor: usize,
    pub n_class: usize,
    #[serde(default)]
    pub rank_scope: RankScope,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            delta: 0.3,
            split_factor: 2,
            n_class: 4,
            rank_scope: RankScope::Occupied,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.split_factor == 0 {
            return Err(Error::Config("split_factor must be at least 1".into()));
        }
        if !(2..=256).contains(&self.n_class) {
            return Err(Error::Config(format!("n_class {} outside [2, 256]", self.n_class)));
        }
        Ok(())
    }
}

/// Voxel indices eligible for refinement under `scope`.
pub fn candidates(dists: &[ClassDistribution], scope: RankScope) -> Vec<usize> {
    match scope {
        RankScope::All => (0..dists.len()).collect(),
        RankScope::Occupied => (0..dists.len()).filter(|&i| dists[i].argmax() != 0).collect(),
    }
}

/// The `ceil(delta * M)` highest-entropy voxels among `candidates`, ties by
/// ascending index. Returned in ascending index order.
pub fn select_refine(dists: &[ClassDistribution], candidates: &[usize], delta: f64) -> Vec<usize> {
    let budget = ceil_count(delta, candidates.len());
    let mut ranked: Vec<(f64, usize)> = candidates.iter().map(|&i| (entropy(&dists[i]), i)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = ranked.into_iter().take(budget).map(|(_, i)| i).collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCountReport {
    pub fine_ops: usize,
    pub full_ops: usize,
    pub ratio: f64,
    pub selected_voxels: usize,
    pub candidate_voxels: usize,
}

impl OpCountReport {
    fn new(selected: usize, candidates: usize, split_factor: usize) -> Self {
        let per = split_factor.pow(3);
        let (fine_ops, full_ops) = (selected * per, candidates * per);
        OpCountReport {
            fine_ops,
            full_ops,
            ratio: if full_ops == 0 { 0.0 } else { fine_ops as f64 / full_ops as f64 },
            selected_voxels: selected,
            candidate_voxels: candidates,
        }
    }
}

/// World-space center of a fine cell.
pub fn fine_center(grid: &GridConfig, coarse: VoxelIndex, cell: &FineCell) -> Vec3 {
    grid.voxel_center(coarse) + cell.offset * grid.coarse_voxel_size()
}

/// Position of a fine cell in the fused volume's index space (voxel `i`'s
/// center sits at `i`).
pub fn fine_volume_pos(coarse: VoxelIndex, cell: &FineCell) -> Vec3 {
    Vec3::new(coarse[0] as f64, coarse[1] as f64, coarse[2] as f64) + cell.offset
}

/// `trilinear(F^V) ‖ mean visible image feature` at a fine cell.
pub fn fine_feature(
    fused: &VoxelFeatureVolume,
    maps: &FeatureMapSet,
    rig: &[CameraModel],
    grid: &GridConfig,
    coarse: VoxelIndex,
    cell: &FineCell,
) -> Vec<f64> {
    let mut f = fused.trilinear_sample(&fine_volume_pos(coarse, cell));
    f.extend(maps.mean_visible_feature(&fine_center(grid, coarse, cell), rig));
    f
}

pub struct DecodeOutput {
    pub fine: OccupancyGrid,
    pub coarse: OccupancyGrid,
    pub coarse_dists: Vec<ClassDistribution>,
    pub selected: Vec<usize>,
    pub report: OpCountReport,
}

pub fn coarse_distributions(fused: &VoxelFeatureVolume, heads: &Heads) -> Result<Vec<ClassDistribution>> {
    (0..fused.n_voxels())
        .into_par_iter()
        .map(|lin| classify(fused.feature_at(lin), &heads.coarse))
        .collect()
}

fn check(fused: &VoxelFeatureVolume, maps: &FeatureMapSet, rig: &[CameraModel], grid: &GridConfig, heads: &Heads, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    heads.validate()?;
    if heads.n_class() != cfg.n_class {
        return Err(Error::Shape(format!("heads predict {} classes, config says {}", heads.n_class(), cfg.n_class)));
    }
    if fused.dims != grid.coarse_dims() || fused.channels != heads.channels() {
        return Err(Error::Shape("fused volume does not match grid or heads".into()));
    }
    if maps.maps.len() != rig.len() || (!rig.is_empty() && maps.channels() != heads.channels()) {
        return Err(Error::Shape("feature maps do not match rig or heads".into()));
    }
    Ok(())
}

fn decode_selected(
    fused: &VoxelFeatureVolume,
    maps: &FeatureMapSet,
    rig: &[CameraModel],
    grid: &GridConfig,
    heads: &Heads,
    cfg: &DecoderConfig,
    dists: Vec<ClassDistribution>,
    candidate_count: usize,
    selected: Vec<usize>,
) -> Result<DecodeOutput> {
    let dims = fused.dims;
    let f = cfg.split_factor;
    let fine_dims = [dims[0] * f, dims[1] * f, dims[2] * f];
    let fine_size = grid.coarse_voxel_size() / f as f64;
    let mut coarse = OccupancyGrid::empty(dims, grid.coarse_voxel_size(), grid.min_corner);
    for (lin, d) in dists.iter().enumerate() {
        coarse.labels[lin] = d.argmax() as u8;
    }
    let mut refine = vec![false; voxel_count(dims)];
    selected.iter().for_each(|&i| refine[i] = true);

    let per_voxel: Vec<Vec<(usize, u8)>> = (0..voxel_count(dims))
        .into_par_iter()
        .map(|lin| {
            let idx = unlinear_index(dims, lin);
            split_voxel(idx, f)
                .into_iter()
                .map(|cell| {
                    let label = if refine[lin] {
                        let feat = fine_feature(fused, maps, rig, grid, idx, &cell);
                        classify(&feat, &heads.fine)?.argmax() as u8
                    } else {
                        coarse.labels[lin]
                    };
                    Ok((linear_index(fine_dims, cell.index), label))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut fine = OccupancyGrid::empty(fine_dims, fine_size, grid.min_corner);
    for (lin, label) in per_voxel.into_iter().flatten() {
        fine.labels[lin] = label;
    }
    let report = OpCountReport::new(selected.len(), candidate_count, f);
    Ok(DecodeOutput {
        fine,
        coarse,
        coarse_dists: dists,
        selected,
        report,
    })
}

/// Coarse classification, entropy-gated selection, then fine classification
/// of the selected voxels' children. Unselected children inherit the coarse
/// label.
pub fn decode(
    fused: &VoxelFeatureVolume,
    maps: &FeatureMapSet,
    rig: &[CameraModel],
    grid: &GridConfig,
    heads: &Heads,
    cfg: &DecoderConfig,
) -> Result<DecodeOutput> {
    check(fused, maps, rig, grid, heads, cfg)?;
    let dists = coarse_distributions(fused, heads)?;
    let cands = candidates(&dists, cfg.rank_scope);
    let selected = select_refine(&dists, &cands, cfg.delta);
    decode_selected(fused, maps, rig, grid, heads, cfg, dists, cands.len(), selected)
}

/// Refines every candidate voxel without consulting entropy.
pub fn decode_ungated(
    fused: &VoxelFeatureVolume,
    maps: &FeatureMapSet,
    rig: &[CameraModel],
    grid: &GridConfig,
    heads: &Heads,
    cfg: &DecoderConfig,
) -> Result<DecodeOutput> {
    check(fused, maps, rig, grid, heads, cfg)?;
    let dists = coarse_distributions(fused, heads)?;
    let cands = candidates(&dists, cfg.rank_scope);
    let n = cands.len();
    decode_selected(fused, maps, rig, grid, heads, cfg, dists, n, cands)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u8,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
}

/// Binary occupancy IoU and mean IoU over the non-empty classes present in
/// either grid. Empty unions count as perfect agreement.
pub fn iou_miou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<Metrics> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims, gt.dims)));
    }
    let mut inter = [0usize; 256];
    let mut union = [0usize; 256];
    let (mut occ_i, mut occ_u) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p != 0 || g != 0 {
            occ_u += 1;
            if p != 0 && g != 0 {
                occ_i += 1;
            }
        }
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per_class: Vec<ClassIou> = (1..256)
        .filter(|&c| union[c] > 0)
        .map(|c| ClassIou {
            class: c as u8,
            iou: inter[c] as f64 / union[c] as f64,
        })
        .collect();
    let miou = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64
    };
    let iou = if occ_u == 0 { 1.0 } else { occ_i as f64 / occ_u as f64 };
    Ok(Metrics { iou, miou, per_class })
}

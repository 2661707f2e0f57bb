//! Two-stage active training: train on the current subset, re-score the
//! full set, keep the hardest `K` percent for the next epoch.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{project_all, CameraModel, FeatureMapSet, ProjectedReference};
use crate::cloud::PointCloud;
use crate::decoder::{fine_feature, fine_volume_pos};
use crate::encoders::{encode_images, encode_lidar, RgbImage};
use crate::fusion::{fusion_backward, occ_fuse, FusionOutput};
use crate::grid::{bin_points, linear_index, split_voxel, trilinear_weights, unlinear_index, GridConfig, OccupancyGrid, VoxelFeatureVolume};
use crate::linalg::ceil_count;
use crate::model::{Grads, Model};
use crate::objectives::{total_loss_logits, LossBreakdown};
use crate::pointprep::{preprocess, PreprocessConfig, ReferencePointSet};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Resolution the training loss is computed at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossResolution {
    /// Coarse head against majority-vote coarse labels.
    #[default]
    Coarse,
    /// Fine head on every child cell against the fine ground truth.
    Fine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub k_percent: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub resolution: LossResolution,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            k_percent: 70.0,
            learning_rate: 0.2,
            seed: 0,
            batch_size: 1,
            resolution: LossResolution::Coarse,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Config(format!("k_percent {} outside (0, 100]", self.k_percent)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the trainable part of the model consumes for one scene.
/// Encoders are frozen, so their outputs are computed once.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub grid: GridConfig,
    pub rig: Vec<CameraModel>,
    pub lidar: VoxelFeatureVolume,
    pub maps: FeatureMapSet,
    pub refs: ReferencePointSet,
    pub proj: ProjectedReference,
    pub coarse_labels: Vec<u8>,
    pub fine_gt: OccupancyGrid,
}

/// Runs preprocessing, both encoders and projection for one scene.
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample(
    id: usize,
    cloud: &PointCloud,
    images: &[RgbImage],
    rig: &[CameraModel],
    fine_gt: &OccupancyGrid,
    grid: &GridConfig,
    pre: &PreprocessConfig,
    model: &Model,
) -> Result<Sample> {
    if fine_gt.dims != grid.fine_dims() {
        return Err(Error::Shape(format!("ground truth {:?} vs grid fine dims {:?}", fine_gt.dims, grid.fine_dims())));
    }
    if let Some(&l) = fine_gt.labels.iter().find(|&&l| l as usize >= model.config.n_class) {
        return Err(Error::LabelOutOfRange { label: l as usize, n_class: model.config.n_class });
    }
    let positions = cloud.positions();
    let binned = bin_points(&positions, grid);
    let refs = preprocess(&binned.bins, &positions, grid, pre)?;
    let lidar = encode_lidar(&binned.bins, cloud, grid, &model.encoder)?;
    let ids: Vec<String> = rig.iter().map(|c| c.id.clone()).collect();
    let maps = encode_images(images, &ids, &model.encoder)?;
    let proj = project_all(&refs, rig, &maps.sizes())?;
    let coarse_labels = fine_gt.downsample_majority(grid.stride)?.labels;
    Ok(Sample {
        id,
        grid: grid.clone(),
        rig: rig.to_vec(),
        lidar,
        maps,
        refs,
        proj,
        coarse_labels,
        fine_gt: fine_gt.clone(),
    })
}

pub fn fuse_sample(model: &Model, s: &Sample) -> Result<FusionOutput> {
    occ_fuse(&s.lidar, &s.maps, &s.refs, &s.proj, &s.grid, &model.fusion)
}

/// Flat logits and labels at the requested resolution, plus the fine
/// features when they were needed.
struct Forward {
    fused: FusionOutput,
    logits: Vec<f64>,
    labels: Vec<u8>,
    /// `(coarse linear index, fine feature)` per fine cell, in logit order.
    fine_inputs: Vec<(usize, crate::grid::FineCell, Vec<f64>)>,
}

fn forward(model: &Model, s: &Sample, res: LossResolution) -> Result<Forward> {
    let fused = fuse_sample(model, s)?;
    let vol = &fused.volume;
    let n = model.config.n_class;
    match res {
        LossResolution::Coarse => {
            let mut logits = Vec::with_capacity(vol.n_voxels() * n);
            for lin in 0..vol.n_voxels() {
                logits.extend(model.heads.coarse.forward(vol.feature_at(lin))?);
            }
            Ok(Forward {
                fused,
                logits,
                labels: s.coarse_labels.clone(),
                fine_inputs: Vec::new(),
            })
        }
        LossResolution::Fine => {
            let f = s.grid.stride;
            let fine_dims = s.fine_gt.dims;
            let cells: Vec<(usize, crate::grid::FineCell, Vec<f64>)> = (0..vol.n_voxels())
                .into_par_iter()
                .flat_map_iter(|lin| {
                    let idx = unlinear_index(vol.dims, lin);
                    split_voxel(idx, f).into_iter().map(move |cell| {
                        let feat = fine_feature(vol, &s.maps, &s.rig, &s.grid, idx, &cell);
                        (lin, cell, feat)
                    })
                })
                .collect();
            let mut logits = Vec::with_capacity(cells.len() * n);
            let mut labels = Vec::with_capacity(cells.len());
            for (_, cell, feat) in &cells {
                logits.extend(model.heads.fine.forward(feat)?);
                labels.push(s.fine_gt.labels[linear_index(fine_dims, cell.index)]);
            }
            Ok(Forward {
                fused,
                logits,
                labels,
                fine_inputs: cells,
            })
        }
    }
}

/// Forward-only `L_total` of one sample.
pub fn sample_loss(model: &Model, s: &Sample, res: LossResolution) -> Result<LossBreakdown> {
    let fw = forward(model, s, res)?;
    Ok(total_loss_logits(&fw.logits, model.config.n_class, &fw.labels)?.0)
}

/// `L_total` of one sample and its gradient for every trainable parameter.
pub fn sample_grad(model: &Model, s: &Sample, res: LossResolution) -> Result<(LossBreakdown, Grads)> {
    let fw = forward(model, s, res)?;
    let n = model.config.n_class;
    let (lb, dlogits, _) = total_loss_logits(&fw.logits, n, &fw.labels)?;
    let mut grads = Grads::zeros_for(model);
    let vol = &fw.fused.volume;
    let c = vol.channels;
    let mut upstream = VoxelFeatureVolume::zeros(vol.dims, c);
    match res {
        LossResolution::Coarse => {
            let head = &model.heads.coarse;
            for lin in 0..vol.n_voxels() {
                let g = &dlogits[lin * n..(lin + 1) * n];
                grads.heads.coarse.weight.add_outer(1.0, g, vol.feature_at(lin));
                grads.heads.coarse.bias.axpy_slice(g);
                head.weight.matvec_t_acc(g, upstream.feature_at_mut(lin));
            }
        }
        LossResolution::Fine => {
            let head = &model.heads.fine;
            let mut dfeat = vec![0.0; 2 * c];
            for (j, (lin, cell, feat)) in fw.fine_inputs.iter().enumerate() {
                let g = &dlogits[j * n..(j + 1) * n];
                grads.heads.fine.weight.add_outer(1.0, g, feat);
                grads.heads.fine.bias.axpy_slice(g);
                dfeat.iter_mut().for_each(|v| *v = 0.0);
                head.weight.matvec_t_acc(g, &mut dfeat);
                let pos = fine_volume_pos(unlinear_index(vol.dims, *lin), cell);
                for (corner, w) in trilinear_weights(vol.dims, &pos) {
                    if w != 0.0 {
                        upstream
                            .feature_at_mut(corner)
                            .iter_mut()
                            .zip(&dfeat[..c])
                            .for_each(|(u, d)| *u += w * d);
                    }
                }
            }
        }
    }
    grads.fusion = fusion_backward(&upstream, &fw.fused.tape, &s.maps, &model.fusion)?;
    Ok((lb, grads))
}

/// Forward-only `L_total` of every sample, in sample order.
pub fn score_samples(model: &Model, samples: &[Sample], res: LossResolution) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| sample_loss(model, s, res).map(|lb| lb.total))
        .collect()
}

/// The `ceil(K/100 · n)` highest scores, ties by ascending id; returned in
/// ascending id order.
pub fn select_topk(scores: &[f64], k_percent: f64) -> Vec<usize> {
    let keep = ceil_count(k_percent / 100.0, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out: Vec<usize> = order.into_iter().take(keep).collect();
    out.sort_unstable();
    out
}

/// One pass of mini-batch gradient descent over `active` in a seeded
/// shuffled order. Returns the epoch's mean training loss.
pub fn train_epoch(model: &mut Model, samples: &[Sample], active: &[usize], cfg: &TrainingConfig, epoch: usize) -> Result<f64> {
    if active.is_empty() {
        return Err(Error::EmptyInput("active sample set"));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::Shape(format!("active id {bad} beyond {} samples", samples.len())));
    }
    let mut order = active.to_vec();
    order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let results: Vec<(LossBreakdown, Grads)> = batch
            .par_iter()
            .map(|&i| sample_grad(model, &samples[i], cfg.resolution))
            .collect::<Result<_>>()?;
        let mut total = Grads::zeros_for(model);
        for (&i, (lb, g)) in batch.iter().zip(&results) {
            if !lb.total.is_finite() || !g.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, sample {}: loss {:?}", samples[i].id, lb)));
            }
            loss_sum += lb.total;
            total.axpy(1.0 / batch.len() as f64, g);
        }
        model.apply(&total, cfg.learning_rate);
    }
    if let Err(e) = model.validate() {
        return Err(Error::NonFinite(format!("epoch {epoch}: parameters diverged ({e})")));
    }
    Ok(loss_sum / order.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Ids trained on during this epoch.
    pub active_ids: Vec<usize>,
    /// Min, quartiles and max of `scores`.
    pub score_quantiles: [f64; 5],
    /// Full-set scores from this epoch's resampling stage.
    pub scores: Vec<f64>,
}

fn quantiles(scores: &[f64]) -> [f64; 5] {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let x = q * (s.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (x - lo as f64)
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

/// Epoch 0 trains on every sample. After each epoch the full set is scored
/// and the top `K` percent becomes the next epoch's active set.
pub fn active_train(model: &mut Model, samples: &[Sample], cfg: &TrainingConfig) -> Result<Vec<EpochRecord>> {
    active_train_with(model, samples, cfg, |_, _| Ok(()))
}

/// [`active_train`] with a hook called after every epoch, e.g. to write a
/// checkpoint.
pub fn active_train_with(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training samples"));
    }
    let mut active: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mean_loss = train_epoch(model, samples, &active, cfg, epoch)?;
        let scores = score_samples(model, samples, cfg.resolution)?;
        log::info!("epoch {epoch}: mean loss {mean_loss:.5} on {} samples", active.len());
        let next = select_topk(&scores, cfg.k_percent);
        let record = EpochRecord {
            epoch,
            mean_loss,
            active_ids: std::mem::replace(&mut active, next),
            score_quantiles: quantiles(&scores),
            scores,
        };
        on_epoch(model, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// Spatially shuffles a ground-truth grid's labels with a seeded
/// permutation, giving a sample whose labels no input explains.
pub fn permute_labels(gt: &OccupancyGrid, seed: u64) -> OccupancyGrid {
    let mut out = gt.clone();
    out.labels.shuffle(&mut stream_rng(seed, 0x9e4d));
    out
}

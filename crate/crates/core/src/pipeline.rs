//! End-to-end flows shared by the `occkit` binary and the test suites:
//! configuration, dataset directories, preprocessing reports, fusion,
//! prediction and the refinement-budget sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, iou_miou, DecoderConfig, Metrics, OpCountReport};
use crate::grid::{bin_points, GridConfig, OccupancyGrid, VoxelFeatureVolume};
use crate::model::{Model, ModelConfig};
use crate::pointprep::{preprocess, Branch, PreprocessConfig, ReferencePointSet};
use crate::scenes::{Preset, Scene, SceneSpec};
use crate::training::{fuse_sample, permute_labels, prepare_sample, Sample, TrainingConfig};
use crate::cloud::PointCloud;
use crate::{Error, Result};

/// Refinement fractions swept by [`bench_sweep`].
pub const BENCH_DELTAS: [f64; 4] = [0.1, 0.2, 0.3, 1.0];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Every tunable of the pipeline. Missing sections take their defaults.
/// The class count always comes from the dataset, so `model.n_class` and
/// `decoder.n_class` are overwritten when a dataset is loaded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Grid for bare point clouds. When a dataset is used it must match the
    /// dataset's grid.
    pub grid: Option<GridConfig>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub decoder: DecoderConfig,
    pub training: TrainingConfig,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed in the pipeline.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.preprocess.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        self.preprocess.validate()?;
        self.model.validate()?;
        self.decoder.validate()?;
        self.training.validate()
    }

    /// Copy with the class count fixed to `n_class`.
    pub fn for_classes(&self, n_class: usize) -> Self {
        let mut c = self.clone();
        c.model.n_class = n_class;
        c.decoder.n_class = n_class;
        c
    }

    /// Grid to use with a dataset whose scenes live on `dataset_grid`.
    pub fn grid_for(&self, dataset_grid: &GridConfig) -> Result<GridConfig> {
        match &self.grid {
            Some(g) if g != dataset_grid => Err(Error::Config("configured grid differs from the dataset's grid".into())),
            _ => Ok(dataset_grid.clone()),
        }
    }

    /// The checkpoint named in `paths`, or a freshly seeded model.
    pub fn load_model(&self) -> Result<Model> {
        match &self.paths.checkpoint {
            Some(dir) => {
                let m = Model::load(dir)?;
                if m.config.n_class != self.model.n_class {
                    return Err(Error::Shape(format!(
                        "checkpoint has {} classes, dataset {}",
                        m.config.n_class, self.model.n_class
                    )));
                }
                Ok(m)
            }
            None => Model::init(&self.model),
        }
    }
}

const DATASET_FORMAT: &str = "occkit-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub dir: String,
    /// Ground truth was label-permuted at generation time.
    pub hard: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub n_class: usize,
    pub samples: Vec<SampleEntry>,
}

/// A directory of scenes plus `dataset.json`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Writes `scenes` as `sample_NNNN/` subdirectories of `root`.
    pub fn write(root: &Path, scenes: &[(Scene, bool)]) -> Result<Dataset> {
        let n_class = scenes.first().ok_or(Error::EmptyInput("dataset scenes"))?.0.spec.n_class;
        if scenes.iter().any(|(s, _)| s.spec.n_class != n_class) {
            return Err(Error::Config("all scenes of a dataset must share n_class".into()));
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut samples = Vec::with_capacity(scenes.len());
        for (id, (scene, hard)) in scenes.iter().enumerate() {
            let dir = format!("sample_{id:04}");
            scene.save(&root.join(&dir))?;
            samples.push(SampleEntry { id, dir, hard: *hard });
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            n_class,
            samples,
        };
        let path = root.join("dataset.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("dataset.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != DATASET_FORMAT || manifest.version != 1 {
            return Err(Error::format("dataset", format!("unsupported {} v{}", manifest.format, manifest.version)));
        }
        if manifest.samples.is_empty() {
            return Err(Error::EmptyInput("dataset samples"));
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn scene(&self, i: usize) -> Result<Scene> {
        let entry = self
            .manifest
            .samples
            .get(i)
            .ok_or_else(|| Error::Config(format!("sample {i} out of range (dataset has {})", self.len())))?;
        let scene = Scene::load(&self.root.join(&entry.dir))?;
        if scene.spec.n_class != self.manifest.n_class {
            return Err(Error::format("dataset", format!("sample {i} has {} classes", scene.spec.n_class)));
        }
        Ok(scene)
    }

    /// Loads and prepares every sample for training.
    pub fn samples(&self, cfg: &PipelineConfig, model: &Model) -> Result<Vec<Sample>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| prepare_scene(i, &self.scene(i)?, cfg, model))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub preset: Preset,
    pub samples: usize,
    /// Without a seed a single-sample request yields the preset's fixture.
    pub seed: Option<u64>,
    /// Every `hard_every`-th sample (ids 0, M, 2M, ...) gets permuted labels;
    /// 0 disables.
    pub hard_every: usize,
}

/// Generates scenes from a preset. Sample `i` uses layout seed `seed + i`.
pub fn synthesize(opts: &SynthOptions) -> Result<Vec<(Scene, bool)>> {
    if opts.samples == 0 {
        return Err(Error::EmptyInput("synth samples"));
    }
    (0..opts.samples)
        .into_par_iter()
        .map(|i| {
            let seed = opts.seed.unwrap_or(0).wrapping_add(i as u64);
            let spec = match opts.seed {
                None if opts.samples == 1 => opts.preset.fixture(),
                _ => opts.preset.random(seed),
            };
            let mut scene = Scene::generate(&spec)?;
            let hard = opts.hard_every > 0 && i % opts.hard_every == 0;
            if hard {
                scene.gt = permute_labels(&scene.gt, seed);
            }
            Ok((scene, hard))
        })
        .collect()
}

/// Generates a single scene from an explicit spec.
pub fn synthesize_spec(spec: &SceneSpec) -> Result<Vec<(Scene, bool)>> {
    Ok(vec![(Scene::generate(spec)?, false)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub raw_points: usize,
    /// Points inside the grid.
    pub binned_points: usize,
    pub processed_voxels: usize,
    pub padded_voxels: usize,
    pub kept_voxels: usize,
    pub sampled_voxels: usize,
    pub reference_points: usize,
    pub synthetic_points: usize,
    pub min_count: usize,
    pub max_count: usize,
    /// Reference-point count -> number of voxels with that count.
    pub count_histogram: BTreeMap<usize, usize>,
}

pub fn preprocess_cloud(cloud: &PointCloud, grid: &GridConfig, cfg: &PreprocessConfig) -> Result<(ReferencePointSet, PreprocessReport)> {
    let positions = cloud.positions();
    let binned = bin_points(&positions, grid);
    let refs = preprocess(&binned.bins, &positions, grid, cfg)?;
    let mut count_histogram = BTreeMap::new();
    for v in &refs.voxels {
        *count_histogram.entry(v.points.len()).or_insert(0) += 1;
    }
    let report = PreprocessReport {
        raw_points: cloud.len(),
        binned_points: binned.bins.iter().map(|b| b.len()).sum(),
        processed_voxels: refs.voxels.len(),
        padded_voxels: refs.branch_count(Branch::Padded),
        kept_voxels: refs.branch_count(Branch::Kept),
        sampled_voxels: refs.branch_count(Branch::Sampled),
        reference_points: refs.total_points(),
        synthetic_points: refs.synthetic_points(),
        min_count: count_histogram.keys().next().copied().unwrap_or(0),
        max_count: count_histogram.keys().next_back().copied().unwrap_or(0),
        count_histogram,
    };
    Ok((refs, report))
}

/// Runs preprocessing, both encoders and projection on a loaded scene.
pub fn prepare_scene(id: usize, scene: &Scene, cfg: &PipelineConfig, model: &Model) -> Result<Sample> {
    let grid = cfg.grid_for(&scene.spec.grid)?;
    prepare_sample(id, &scene.cloud, &scene.images, &scene.spec.rig, &scene.gt, &grid, &cfg.preprocess, model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub channels: usize,
    /// Voxels that received no camera contribution.
    pub fallback_voxels: usize,
    /// Name of the raw little-endian f64 blob, `(z, y, x, c)` order.
    pub data: String,
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save_volume(vol: &VoxelFeatureVolume, fallback_voxels: usize, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = format!("{stem}.bin");
    let bytes: Vec<u8> = vol.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join(&bin), bytes).map_err(|e| Error::io(dir.join(&bin), e))?;
    let header = VolumeHeader {
        dims: vol.dims,
        channels: vol.channels,
        fallback_voxels,
        data: bin,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))
}

pub fn load_volume(header_path: &Path) -> Result<VoxelFeatureVolume> {
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text)?;
    let bin = header_path.with_file_name(&header.data);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format("volume", "blob length is not a multiple of 8"));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    VoxelFeatureVolume::from_data(header.dims, header.channels, data)
}

pub fn fuse(model: &Model, sample: &Sample) -> Result<(VoxelFeatureVolume, usize)> {
    let out = fuse_sample(model, sample)?;
    let n_fallback = out.tape.fallback_voxels().len();
    Ok((out.volume, n_fallback))
}

/// What `predict` writes next to the predicted grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictReport {
    pub ops: OpCountReport,
    pub metrics: Metrics,
    pub coarse_metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grid: OccupancyGrid,
    pub report: PredictReport,
}

/// Fuses, decodes, and scores the fine prediction against the sample's
/// ground truth and the coarse prediction against the majority-vote labels.
pub fn predict(model: &Model, sample: &Sample, dec: &DecoderConfig) -> Result<Prediction> {
    let (fused, _) = fuse(model, sample)?;
    let out = decode(&fused, &sample.maps, &sample.rig, &sample.grid, &model.heads, dec)?;
    let mut coarse_gt = out.coarse.clone();
    coarse_gt.labels.clone_from(&sample.coarse_labels);
    Ok(Prediction {
        report: PredictReport {
            ops: out.report,
            metrics: iou_miou(&out.fine, &sample.fine_gt)?,
            coarse_metrics: iou_miou(&out.coarse, &coarse_gt)?,
        },
        grid: out.fine,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub delta: f64,
    pub candidate_voxels: usize,
    pub selected_voxels: usize,
    pub fine_ops: usize,
    pub full_ops: usize,
    pub ratio: f64,
    /// `1 - ratio`.
    pub reduction: f64,
}

/// Decodes one fused volume at each `delta` and tallies refinement cost.
pub fn bench_sweep(model: &Model, sample: &Sample, dec: &DecoderConfig, deltas: &[f64]) -> Result<Vec<BenchRow>> {
    let (fused, _) = fuse(model, sample)?;
    deltas
        .iter()
        .map(|&delta| {
            let cfg = DecoderConfig { delta, ..dec.clone() };
            let r = decode(&fused, &sample.maps, &sample.rig, &sample.grid, &model.heads, &cfg)?.report;
            Ok(BenchRow {
                delta,
                candidate_voxels: r.candidate_voxels,
                selected_voxels: r.selected_voxels,
                fine_ops: r.fine_ops,
                full_ops: r.full_ops,
                ratio: r.ratio,
                reduction: 1.0 - r.ratio,
            })
        })
        .collect()
}

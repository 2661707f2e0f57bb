use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use log::info;
use serde::Serialize;

use occkit_core::decoder::iou_miou;
use occkit_core::pipeline::{
    bench_sweep, fuse, predict, prepare_scene, preprocess_cloud, save_volume, synthesize, synthesize_spec, BenchRow,
    SynthOptions, BENCH_DELTAS,
};
use occkit_core::training::active_train_with;
use occkit_core::{Dataset, Error, GridConfig, OccupancyGrid, PipelineConfig, PointCloud, Preset, Scene, SceneSpec};

const INPUT_HELP: &str = "\
Inputs:
  dataset dir   written by `occkit synth`: dataset.json plus sample_NNNN/ holding
                scene.json, cloud.ocfp, gt.occg and one <camera id>.ppm per camera
  point cloud   OCFP binary, or CSV with header x,y,z,intensity when the name ends in .csv
  images        PPM (P6), or raw RGB bytes with a <name>.json sidecar {\"width\", \"height\"}

Environment:
  OCCKIT_LOG    error (default), info or debug

Exit status: 0 success, 1 usage, 2 data error, 3 numerical failure.";

#[derive(Parser, Debug)]
#[command(name = "occkit", version, about = "LiDAR-camera fusion for semantic occupancy prediction", after_help = INPUT_HELP)]
struct Cli {
    /// Pipeline configuration (JSON); missing sections use defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory (default: `paths.out` from the config, else `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// Scene preset (tiny or small).
        #[arg(long, default_value = "tiny")]
        preset: Preset,
        /// Explicit scene description (JSON) instead of a preset.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        /// Number of scenes. Without --seed a single scene is the preset fixture.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Permute the labels of every M-th scene (0 disables).
        #[arg(long, default_value_t = 0, value_name = "M")]
        hard_every: usize,
    },
    /// Build reference points for a point cloud and report per-branch counts.
    Preprocess {
        /// Dataset directory or point cloud file.
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Write the fused voxel feature volume of one sample.
    Fuse {
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Predict a fine occupancy grid with op counts and metrics.
    Predict {
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Refinement fraction; overrides the config.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Active training over a dataset; writes checkpoints and history.jsonl.
    Train {
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Percentage of samples kept for the next epoch.
        #[arg(long)]
        k_percent: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Compare a predicted grid with ground truth.
    Eval { pred: PathBuf, gt: PathBuf },
    /// Sweep the refinement fraction and report fine-op ratios.
    Bench {
        /// Preset fixture to run on when no dataset is given.
        #[arg(long, default_value = "small")]
        preset: Preset,
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn main() {
    std::process::exit(run(std::env::args_os()));
}

fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{}", Cli::command().render_help());
            return 1;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OCCKIT_LOG", "error")).init();
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_help());
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                3
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.out.clone().or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from("out"));

    match cli.command {
        Command::Synth { preset, spec, samples, hard_every } => {
            let scenes = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let mut spec: SceneSpec = serde_json::from_str(&text).map_err(Error::from)?;
                    if let Some(seed) = cli.seed {
                        spec.seed = seed;
                    }
                    synthesize_spec(&spec)?
                }
                None => synthesize(&SynthOptions { preset, samples, seed: cli.seed, hard_every })?,
            };
            let ds = Dataset::write(&out, &scenes)?;
            println!("wrote {} scene(s) to {}", ds.len(), out.display());
        }
        Command::Preprocess { input, sample } => {
            let (cloud, grid) = if input.is_dir() {
                let scene = Dataset::open(&input)?.scene(sample)?;
                let grid = cfg.grid_for(&scene.spec.grid)?;
                (scene.cloud, grid)
            } else {
                let grid = cfg.grid.clone().unwrap_or_else(GridConfig::desk_default);
                (PointCloud::load(&input)?, grid)
            };
            let (refs, report) = preprocess_cloud(&cloud, &grid, &cfg.preprocess)?;
            create_dir(&out)?;
            write_json(&out.join("refs.json"), &refs)?;
            write_json(&out.join("preprocess_report.json"), &report)?;
            println!(
                "{} voxels ({} padded, {} kept, {} sampled), {} reference points",
                report.processed_voxels, report.padded_voxels, report.kept_voxels, report.sampled_voxels, report.reference_points
            );
        }
        Command::Fuse { dataset, sample, checkpoint } => {
            let (cfg, scene) = load_scene(cfg, dataset, checkpoint, sample)?;
            let model = cfg.load_model()?;
            let s = prepare_scene(sample, &scene, &cfg, &model)?;
            let (vol, n_fallback) = fuse(&model, &s)?;
            save_volume(&vol, n_fallback, &out, "fused")?;
            println!("fused {:?}x{} ({} fallback voxels)", vol.dims, vol.channels, n_fallback);
        }
        Command::Predict { dataset, sample, checkpoint, delta } => {
            let (mut cfg, scene) = load_scene(cfg, dataset, checkpoint, sample)?;
            if let Some(d) = delta {
                cfg.decoder.delta = d;
                cfg.decoder.validate()?;
            }
            let model = cfg.load_model()?;
            let s = prepare_scene(sample, &scene, &cfg, &model)?;
            let p = predict(&model, &s, &cfg.decoder)?;
            create_dir(&out)?;
            p.grid.save(&out.join("pred.occg"))?;
            write_json(&out.join("ops.json"), &p.report.ops)?;
            write_json(&out.join("metrics.json"), &p.report.metrics)?;
            write_json(&out.join("coarse_metrics.json"), &p.report.coarse_metrics)?;
            println!(
                "fine-op ratio {:.4} ({} of {} voxels), IoU {:.4}, mIoU {:.4}",
                p.report.ops.ratio,
                p.report.ops.selected_voxels,
                p.report.ops.candidate_voxels,
                p.report.metrics.iou,
                p.report.metrics.miou
            );
        }
        Command::Train { dataset, checkpoint, epochs, k_percent, learning_rate } => {
            let path = dataset_path(&cfg, dataset)?;
            let ds = Dataset::open(&path)?;
            let mut cfg = cfg.for_classes(ds.manifest.n_class);
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(k) = k_percent {
                cfg.training.k_percent = k;
            }
            if let Some(lr) = learning_rate {
                cfg.training.learning_rate = lr;
            }
            cfg.training.validate()?;
            let mut model = cfg.load_model()?;
            let samples = ds.samples(&cfg, &model)?;
            info!("training on {} samples", samples.len());
            let ckpt = out.join("checkpoints");
            create_dir(&out)?;
            let hist_path = out.join("history.jsonl");
            let mut history = std::fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
            let records = active_train_with(&mut model, &samples, &cfg.training, |m, rec| {
                m.save(&ckpt.join(format!("epoch_{:03}", rec.epoch)))?;
                let line = serde_json::to_string(rec)?;
                writeln!(history, "{line}").map_err(|e| Error::io(&hist_path, e))
            })?;
            model.save(&out.join("model"))?;
            if let Some(last) = records.last() {
                println!("{} epochs, final mean loss {:.5}, model {}", records.len(), last.mean_loss, model.param_hash());
            }
        }
        Command::Eval { pred, gt } => {
            let metrics = iou_miou(&OccupancyGrid::load(&pred)?, &OccupancyGrid::load(&gt)?)?;
            create_dir(&out)?;
            write_json(&out.join("metrics.json"), &metrics)?;
            println!("IoU {:.4}, mIoU {:.4}", metrics.iou, metrics.miou);
        }
        Command::Bench { preset, dataset, sample, checkpoint } => {
            let (cfg, scene) = match dataset.or_else(|| cfg.paths.dataset.clone()) {
                Some(d) => load_scene(cfg, Some(d), checkpoint, sample)?,
                None => {
                    let scene = Scene::generate(&preset.fixture())?;
                    let mut cfg = cfg.for_classes(scene.spec.n_class);
                    if checkpoint.is_some() {
                        cfg.paths.checkpoint = checkpoint;
                    }
                    (cfg, scene)
                }
            };
            let model = cfg.load_model()?;
            let s = prepare_scene(sample, &scene, &cfg, &model)?;
            let rows = bench_sweep(&model, &s, &cfg.decoder, &BENCH_DELTAS)?;
            create_dir(&out)?;
            write_json(&out.join("bench.json"), &rows)?;
            print!("{}", bench_table(&rows));
        }
    }
    Ok(())
}

fn dataset_path(cfg: &PipelineConfig, arg: Option<PathBuf>) -> CmdResult<PathBuf> {
    arg.or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| Failure::Usage("no dataset given (positional argument or paths.dataset)".into()))
}

/// Opens the dataset, fixes the class count and resolves the checkpoint.
fn load_scene(
    cfg: PipelineConfig,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    sample: usize,
) -> CmdResult<(PipelineConfig, Scene)> {
    let ds = Dataset::open(&dataset_path(&cfg, dataset)?)?;
    let mut cfg = cfg.for_classes(ds.manifest.n_class);
    if checkpoint.is_some() {
        cfg.paths.checkpoint = checkpoint;
    }
    let scene = ds.scene(sample)?;
    Ok((cfg, scene))
}

fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>6} {:>10} {:>9} {:>9} {:>9} {:>7} {:>9}\n",
        "delta", "candidates", "selected", "fine_ops", "full_ops", "ratio", "reduction"
    );
    for r in rows {
        s += &format!(
            "{:>6.2} {:>10} {:>9} {:>9} {:>9} {:>7.4} {:>9.4}\n",
            r.delta, r.candidate_voxels, r.selected_voxels, r.fine_ops, r.full_ops, r.ratio, r.reduction
        );
    }
    s
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

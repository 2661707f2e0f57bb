//! Exit criteria. Each check prints one PASS/FAIL line with its measured
//! runtime; the process fails if any check fails.
//!
//!     cargo test --test acceptance            # all criteria
//!     cargo test --test acceptance -- 3 5     # selected ones

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use occkit_core::cameras::{project_all, FeatureMap, Pixel, FeatureMapSet, Projection, ProjectedReference};
use occkit_core::decoder::{entropy, iou_miou, select_refine, ClassDistribution};
use occkit_core::fusion::{
    build_query, deform_attn, deform_attn_backward, fusion_backward, occ_fuse, AttentionParams, FusionConfig, Query,
};
use occkit_core::grid::{bin_points, unlinear_index, voxel_count, GridConfig, OccupancyGrid, VoxelFeatureVolume};
use occkit_core::linalg::{dot, Mat};
use occkit_core::objectives::{cross_entropy, lovasz_softmax, scal_losses, total_loss, LossGrad};
use occkit_core::pipeline::{predict, prepare_scene, synthesize, PipelineConfig, SynthOptions};
use occkit_core::pointprep::{fps, preprocess, PointSource, PreprocessConfig, RefPoint, VoxelRefs};
use occkit_core::rng::stream_rng;
use occkit_core::training::{
    active_train, sample_loss, score_samples, select_topk, train_epoch, LossResolution, Sample, TrainingConfig,
};
use occkit_core::{Model, ModelConfig, Preset, ReferencePointSet, Scene, Vec3};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "reference-point count law", budget: Some(Duration::from_secs(10)), run: count_law },
        Criterion { id: 2, name: "FPS matches naive greedy", budget: Some(Duration::from_secs(5)), run: fps_oracle },
        Criterion { id: 3, name: "attention identity and gradients", budget: Some(Duration::from_secs(30)), run: gradients },
        Criterion { id: 4, name: "fusion averaging laws", budget: None, run: averaging_laws },
        Criterion { id: 5, name: "entropy-gate op ratio", budget: Some(Duration::from_secs(20)), run: op_ratio },
        Criterion { id: 6, name: "entropy and selection size", budget: None, run: entropy_selection },
        Criterion { id: 7, name: "active training mechanics", budget: None, run: active_mechanics },
        Criterion { id: 8, name: "hard-example enrichment", budget: Some(Duration::from_secs(120)), run: enrichment },
        Criterion { id: 9, name: "end-to-end learning", budget: Some(Duration::from_secs(300)), run: learning },
        Criterion { id: 10, name: "loss identities", budget: None, run: loss_identities },
        Criterion { id: 11, name: "CLI determinism", budget: None, run: cli_determinism },
    ];
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), b.as_secs())),
            (o, _) => o,
        };
        let budget = c.budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag}  {:<34} [{:.2}s{budget}]  {detail}", c.id, c.name, elapsed.as_secs_f64());
        if outcome.is_err() {
            failed.push(c.id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// 1 ------------------------------------------------------------------------

const SPECIAL_COUNTS: [usize; 6] = [0, 5, 6, 20, 21, 500];

fn count_law() -> Check {
    let grid = Preset::Small.grid();
    let cfg = PreprocessConfig { tau: 5, theta: 20, ..Default::default() };
    let dims = grid.coarse_dims();
    let n_vox = voxel_count(dims);
    let mut seen = BTreeSet::new();
    let mut processed = 0usize;
    for cloud_seed in 0..1000u64 {
        let mut rng = stream_rng(cloud_seed, 1);
        let mut cloud = Vec::new();
        let n_occupied = rng.random_range(1..24);
        let mut lins: Vec<usize> = (0..n_vox).collect();
        lins.partial_shuffle(&mut rng, n_occupied);
        for &lin in &lins[..n_occupied] {
            let count = if rng.random_bool(0.5) {
                *SPECIAL_COUNTS[1..].choose(&mut rng).unwrap()
            } else {
                rng.random_range(1..48)
            };
            let (lo, hi) = grid.voxel_bounds(unlinear_index(dims, lin));
            for _ in 0..count {
                cloud.push(Vec3::from_fn(|a, _| rng.random_range(lo[a]..hi[a])));
            }
        }
        let mut cfg = cfg.clone();
        cfg.seed = cloud_seed;
        let binned = bin_points(&cloud, &grid);
        let refs = preprocess(&binned.bins, &cloud, &grid, &cfg).map_err(|e| e.to_string())?;
        for v in &refs.voxels {
            let n = v.points.len();
            ensure!(n > 5 && n <= 20, "cloud {cloud_seed}: voxel {:?} with {} raw points ends with {n}", v.voxel_index, v.raw_count);
            seen.insert(v.raw_count);
        }
        processed += refs.voxels.len();
    }
    let missing: Vec<usize> = SPECIAL_COUNTS.iter().copied().filter(|c| !seen.contains(c)).collect();
    ensure!(missing.is_empty(), "branch coverage missing raw counts {missing:?}");
    Ok(format!("{processed} voxels over 1000 clouds, all in (5, 20]; covered raw counts {SPECIAL_COUNTS:?}"))
}

// 2 ------------------------------------------------------------------------

/// O(N^2 k) greedy: recompute every candidate's distance to the whole
/// selected set at each step.
fn naive_fps(points: &[Vec3], k: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < k.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (j, p) in points.iter().enumerate() {
            if sel.contains(&j) {
                continue;
            }
            let d = sel.iter().map(|&s| (p - points[s]).norm()).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((j, d));
            }
        }
        sel.push(best.unwrap().0);
    }
    sel.sort_unstable();
    sel
}

fn fps_oracle() -> Check {
    let mut with_ties = 0;
    for seed in 0..500u64 {
        let mut rng = stream_rng(seed, 2);
        let n = rng.random_range(1..=64);
        let k = rng.random_range(1..=32);
        // every third cloud lives on a coarse lattice, which forces distance ties
        let lattice = seed % 3 == 0;
        let points: Vec<Vec3> = (0..n)
            .map(|_| {
                if lattice {
                    Vec3::from_fn(|_, _| rng.random_range(0..3) as f64)
                } else {
                    Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))
                }
            })
            .collect();
        with_ties += lattice as usize;
        let start = rng.random_range(0..n);
        let got = fps(&points, k, start).map_err(|e| e.to_string())?;
        let want = naive_fps(&points, k, start);
        ensure!(got == want, "cloud {seed} (n={n}, k={k}): {got:?} vs {want:?}");
    }
    Ok(format!("500 clouds identical ({with_ties} lattice clouds with ties)"))
}

// 3 ------------------------------------------------------------------------

fn random_map(w: usize, h: usize, c: usize, rng: &mut impl Rng) -> FeatureMap {
    let mut m = FeatureMap::zeros("cam", w, h, c);
    m.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    m
}

fn random_params(c: usize, h: usize, k: usize, rng: &mut impl Rng) -> AttentionParams {
    let mut p = AttentionParams::init(&FusionConfig { channels: c, n_heads: h, n_keys: k, seed: 0 });
    p.offset_gen = Mat::uniform(h * k * 2, c + 3, 1.5, rng);
    p.weight_gen = Mat::uniform(h * k, c + 3, 1.0, rng);
    p.w_out = (0..h).map(|_| Mat::uniform(c, c, 1.0, rng)).collect();
    p.w_value = (0..h).map(|_| Mat::uniform(c, c, 1.0, rng)).collect();
    p.fallback = Mat::uniform(c, c, 1.0, rng);
    p
}

/// Worst relative error between `analytic` and central differences of `loss`
/// over every parameter entry.
fn fd_params(params: &AttentionParams, analytic: &AttentionParams, loss: impl Fn(&AttentionParams) -> f64) -> f64 {
    let h = 1e-5;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        for i in 0..params.tensors()[t].1.data.len() {
            let orig = params.tensors()[t].1.data[i];
            probe.tensors_mut()[t].1.data[i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[t].1.data[i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[t].1.data[i] = orig;
            worst = worst.max(rel_err(analytic.tensors()[t].1.data[i], (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn fd_probs(probs: &[f64], analytic: &LossGrad, loss: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-5;
    let mut p = probs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        worst = worst.max(rel_err(analytic.grad[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// A fused volume over a few voxels, with random points, projections and
/// feature maps.
struct FuseFixture {
    grid: GridConfig,
    f_l: VoxelFeatureVolume,
    maps: FeatureMapSet,
    refs: ReferencePointSet,
    proj: ProjectedReference,
}

fn fuse_fixture(c: usize, rng: &mut impl Rng) -> FuseFixture {
    let nx = rng.random_range(1..=3);
    let grid = GridConfig::new(Vec3::zeros(), Vec3::new(nx as f64, 1.0, 1.0), 1.0, 1).unwrap();
    let dims = grid.coarse_dims();
    let n_cam = rng.random_range(1..=2);
    let maps = FeatureMapSet::new((0..n_cam).map(|_| random_map(9, 8, c, rng)).collect()).unwrap();
    let f_l = VoxelFeatureVolume::from_data(dims, c, (0..nx * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut voxels = Vec::new();
    let mut pvox = Vec::new();
    for x in 0..nx {
        let n_pts = rng.random_range(1..=3);
        let mut pts = Vec::new();
        let mut pp = Vec::new();
        for _ in 0..n_pts {
            pts.push(RefPoint {
                position: Vec3::new(x as f64 + rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                source: PointSource::Synthetic,
            });
            // some points see no camera, and the last voxel may see none
            let mut cams = Vec::new();
            for camera in 0..n_cam {
                if rng.random_bool(0.8) {
                    cams.push(Projection { camera, pixel: Pixel::new(rng.random_range(0.5..7.5), rng.random_range(0.5..6.5)) });
                }
            }
            pp.push(cams);
        }
        voxels.push(VoxelRefs { voxel_index: [x, 0, 0], raw_count: 0, branch: occkit_core::pointprep::Branch::Padded, points: pts });
        pvox.push(pp);
    }
    FuseFixture { grid, f_l, maps, refs: ReferencePointSet { dims, voxels }, proj: ProjectedReference { voxels: pvox } }
}

fn gradients() -> Check {
    let mut worst_attn: f64 = 0.0;
    let mut worst_fuse: f64 = 0.0;
    let mut worst_loss = [0.0f64; 4];
    let mut identity_checks = 0;
    for seed in 0..100u64 {
        let mut rng = stream_rng(seed, 3);
        let c = rng.random_range(2..=3);
        let (h, k) = (rng.random_range(1..=2), rng.random_range(1..=3));

        // identity configuration
        let map = random_map(7, 6, c, &mut rng);
        let mut id = AttentionParams::init(&FusionConfig { channels: c, n_heads: 1, n_keys: 1, seed });
        id.w_out = vec![Mat::identity(c)];
        id.w_value = vec![Mat::identity(c)];
        let q = Query((0..c + 3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let px = Pixel::new(rng.random_range(0.0..6.0), rng.random_range(0.0..5.0));
        ensure!(deform_attn(&q, &px, &map, &id) == map.bilinear(&px), "instance {seed}: identity output differs from bilinear");
        identity_checks += 1;

        // deformable attention
        let p = random_params(c, h, k, &mut rng);
        let r: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let px = Pixel::new(rng.random_range(1.0..6.0), rng.random_range(1.0..5.0));
        let mut g = p.zeros_like();
        deform_attn_backward(&q, &px, &map, &p, &r, &mut g);
        worst_attn = worst_attn.max(fd_params(&p, &g, |pp| dot(&deform_attn(&q, &px, &map, pp), &r)));

        // fusion
        let fx = fuse_fixture(c, &mut rng);
        let out = occ_fuse(&fx.f_l, &fx.maps, &fx.refs, &fx.proj, &fx.grid, &p).map_err(|e| e.to_string())?;
        let up: Vec<f64> = (0..out.volume.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upv = VoxelFeatureVolume::from_data(out.volume.dims, c, up.clone()).unwrap();
        let g = fusion_backward(&upv, &out.tape, &fx.maps, &p).map_err(|e| e.to_string())?;
        worst_fuse = worst_fuse.max(fd_params(&p, &g, |pp| {
            dot(&occ_fuse(&fx.f_l, &fx.maps, &fx.refs, &fx.proj, &fx.grid, pp).unwrap().volume.data, &up)
        }));

        // losses
        let n_class = rng.random_range(2..=4);
        let n_vox = rng.random_range(3..=6);
        let mut probs = Vec::new();
        for _ in 0..n_vox {
            let row: Vec<f64> = (0..n_class).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            probs.extend(row.iter().map(|v| v / s));
        }
        let mut labels: Vec<u8> = (0..n_vox).map(|_| rng.random_range(0..n_class as u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let e = |r: occkit_core::Result<LossGrad>| r.map_err(|e| e.to_string());
        let ce = e(cross_entropy(&probs, n_class, &labels))?;
        worst_loss[0] = worst_loss[0].max(fd_probs(&probs, &ce, |p| cross_entropy(p, n_class, &labels).unwrap().value));
        let lv = e(lovasz_softmax(&probs, n_class, &labels))?;
        worst_loss[1] = worst_loss[1].max(fd_probs(&probs, &lv, |p| lovasz_softmax(p, n_class, &labels).unwrap().value));
        let (geo, sem) = scal_losses(&probs, n_class, &labels).map_err(|e| e.to_string())?;
        worst_loss[2] = worst_loss[2].max(fd_probs(&probs, &geo, |p| scal_losses(p, n_class, &labels).unwrap().0.value));
        worst_loss[3] = worst_loss[3].max(fd_probs(&probs, &sem, |p| scal_losses(p, n_class, &labels).unwrap().1.value));
    }
    let summary = format!(
        "{identity_checks} identity checks exact; max rel err attn {worst_attn:.1e}, fuse {worst_fuse:.1e}, ce {:.1e}, lovasz {:.1e}, scal_geo {:.1e}, scal_sem {:.1e}",
        worst_loss[0], worst_loss[1], worst_loss[2], worst_loss[3]
    );
    let worst = worst_loss.iter().fold(worst_attn.max(worst_fuse), |a, &b| a.max(b));
    ensure!(worst <= 1e-4, "{summary}");
    Ok(summary)
}

// 4 ------------------------------------------------------------------------

fn with_params(seed: u64, c: usize) -> AttentionParams {
    random_params(c, 2, 4, &mut stream_rng(seed, 4))
}

fn averaging_laws() -> Check {
    let cfg = PipelineConfig::default().for_classes(3);
    let model = Model::init(&cfg.model).map_err(|e| e.to_string())?;
    let c = cfg.model.channels;
    let mut perm_voxels = 0;
    for seed in 0..4u64 {
        let scene = Scene::generate(&Preset::Tiny.random(200 + seed)).map_err(|e| e.to_string())?;
        let s = prepare_scene(0, &scene, &cfg, &model).map_err(|e| e.to_string())?;
        let params = with_params(seed, c);
        let base = occ_fuse(&s.lidar, &s.maps, &s.refs, &s.proj, &s.grid, &params).unwrap().volume;

        // permutation within voxels, then canonical order restored
        let mut shuffled = s.refs.clone();
        let mut rng = stream_rng(seed, 44);
        for v in &mut shuffled.voxels {
            v.points.shuffle(&mut rng);
            v.canonicalize();
        }
        let proj = project_all(&shuffled, &s.rig, &s.maps.sizes()).unwrap();
        let permuted = occ_fuse(&s.lidar, &s.maps, &shuffled, &proj, &s.grid, &params).unwrap().volume;
        ensure!(
            permuted.data.iter().zip(&base.data).all(|(a, b)| a.to_bits() == b.to_bits()),
            "scene {seed}: permuted reference points change the fused volume"
        );
        perm_voxels += shuffled.voxels.len();

        // duplicating every camera leaves each point's camera mean unchanged
        let rig: Vec<_> = s.rig.iter().chain(&s.rig).cloned().collect();
        let maps = FeatureMapSet::new(s.maps.maps.iter().chain(&s.maps.maps).cloned().collect()).unwrap();
        let proj = project_all(&s.refs, &rig, &maps.sizes()).unwrap();
        let dup = occ_fuse(&s.lidar, &maps, &s.refs, &proj, &s.grid, &params).unwrap().volume;
        let worst = dup.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(worst <= 1e-12, "scene {seed}: camera duplication moved the output by {worst:e}");
    }

    // two visible points average their single-point results
    for seed in 0..50u64 {
        let mut rng = stream_rng(seed, 45);
        let c = rng.random_range(2..=4);
        let params = random_params(c, 2, 3, &mut rng);
        let grid = GridConfig::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), 1.0, 1).unwrap();
        let maps = FeatureMapSet::new(vec![random_map(10, 9, c, &mut rng)]).unwrap();
        let f_l = VoxelFeatureVolume::from_data([1, 1, 1], c, (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pts: Vec<Vec3> = (0..2).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..1.0))).collect();
        let px: Vec<Pixel> = (0..2).map(|_| Pixel::new(rng.random_range(0.5..8.5), rng.random_range(0.5..7.5))).collect();
        let refs = |which: &[usize]| ReferencePointSet {
            dims: [1, 1, 1],
            voxels: vec![VoxelRefs {
                voxel_index: [0, 0, 0],
                raw_count: 0,
                branch: occkit_core::pointprep::Branch::Padded,
                points: which.iter().map(|&i| RefPoint { position: pts[i], source: PointSource::Synthetic }).collect(),
            }],
        };
        let proj = |which: &[usize]| ProjectedReference {
            voxels: vec![which.iter().map(|&i| vec![Projection { camera: 0, pixel: px[i] }]).collect()],
        };
        let fuse = |which: &[usize]| occ_fuse(&f_l, &maps, &refs(which), &proj(which), &grid, &params).unwrap().volume.data;
        let (both, a, b) = (fuse(&[0, 1]), fuse(&[0]), fuse(&[1]));
        let direct = deform_attn(&build_query(&f_l.data, &pts[0], &grid), &px[0], &maps.maps[0], &params);
        ensure!(a == direct, "fixture {seed}: single point differs from direct attention");
        for ch in 0..c {
            let want = (a[ch] + b[ch]) / 2.0;
            ensure!((both[ch] - want).abs() <= 1e-12, "fixture {seed}: two-point mean off by {:e}", (both[ch] - want).abs());
        }
    }
    Ok(format!("bit-exact over {perm_voxels} shuffled voxels; duplication within 1e-12 on 4 scenes; 50 two-point means"))
}

// 5 ------------------------------------------------------------------------

fn run_cli(args: &[&str], threads: usize, out: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_occkit"))
        .args(args)
        .args(["--threads", &threads.to_string(), "--out", out.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("occkit {args:?} exited {}: {}", o.status, String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn op_ratio() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    let mut informative = 0;
    for seed in 0..5u64 {
        let out = tmp.path().join(format!("bench{seed}"));
        run_cli(&["bench", "--preset", "small", "--seed", &seed.to_string()], 1, &out)?;
        let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
        let rows = rows.as_array().ok_or("bench.json is not a list")?;
        let deltas: Vec<f64> = rows.iter().map(|r| r["delta"].as_f64().unwrap()).collect();
        ensure!(deltas == [0.1, 0.2, 0.3, 1.0], "swept deltas {deltas:?}");
        let m = rows[0]["candidate_voxels"].as_u64().unwrap() as usize;
        for r in rows {
            let (delta, ratio) = (r["delta"].as_f64().unwrap(), r["ratio"].as_f64().unwrap());
            if m == 0 {
                ensure!(r["fine_ops"].as_u64() == Some(0), "seed {seed}: no candidates but fine ops reported");
            } else {
                ensure!((ratio - delta).abs() <= 1.0 / m as f64, "seed {seed}: delta {delta} ratio {ratio} (M = {m})");
            }
        }
        if m > 0 {
            informative += 1;
            notes.push(format!("seed {seed}: M={m} ratio@0.3={:.4}", rows[2]["ratio"].as_f64().unwrap()));
        } else {
            notes.push(format!("seed {seed}: M=0"));
        }
    }
    ensure!(informative > 0, "every seed had an empty candidate set");
    Ok(notes.join(", "))
}

// 6 ------------------------------------------------------------------------

fn entropy_selection() -> Check {
    for n in 2..=17 {
        let mut one_hot = vec![0.0; n];
        one_hot[n / 2] = 1.0;
        ensure!(entropy(&ClassDistribution { probs: one_hot }) == 0.0, "one-hot entropy non-zero for n={n}");
        let u = entropy(&ClassDistribution::uniform(n));
        ensure!((u - (n as f64).ln()).abs() <= 1e-12, "uniform entropy {u} vs ln {n}");
    }
    let mut rng = stream_rng(6, 6);
    for trial in 0..200 {
        let m = rng.random_range(0..300);
        let delta = match trial % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..=1.0),
        };
        let dists: Vec<ClassDistribution> = (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                ClassDistribution { probs: raw.iter().map(|v| v / s).collect() }
            })
            .collect();
        let cands: Vec<usize> = (0..m).collect();
        let want = (delta * m as f64 - 1e-9).ceil().max(0.0) as usize;
        let got = select_refine(&dists, &cands, delta).len();
        ensure!(got == want, "delta {delta}, M {m}: selected {got}, expected {want}");
    }
    Ok("entropy bounds exact for n in 2..=17; 200 selection sizes match ceil(delta*M)".into())
}

// 7 ------------------------------------------------------------------------

fn small_model() -> Model {
    Model::init(&ModelConfig { channels: 4, n_heads: 1, n_keys: 2, n_class: 3, image_stride: 2, seed: 3 }).unwrap()
}

fn tiny_samples(model: &Model, n: usize, seed: u64) -> Result<Vec<Sample>, String> {
    let cfg = PipelineConfig::default().for_classes(3);
    synthesize(&SynthOptions { preset: Preset::Tiny, samples: n, seed: Some(seed), hard_every: 0 })
        .map_err(|e| e.to_string())?
        .iter()
        .enumerate()
        .map(|(i, (scene, _))| prepare_scene(i, scene, &cfg, model).map_err(|e| e.to_string()))
        .collect()
}

fn active_mechanics() -> Check {
    for n in 1..=50usize {
        let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 17) as f64).collect();
        for k in [30.0, 50.0, 70.0, 100.0] {
            let want = (k as usize * n).div_ceil(100);
            ensure!(select_topk(&scores, k).len() == want, "n {n}, K {k}");
        }
    }
    let base = small_model();
    let samples = tiny_samples(&base, 7, 70)?;
    let n = samples.len();
    let cfg = |k: f64| TrainingConfig { epochs: 3, k_percent: k, learning_rate: 0.2, seed: 5, batch_size: 2, ..Default::default() };
    for k in [30.0, 50.0, 70.0, 100.0] {
        let mut m = base.clone();
        let hist = active_train(&mut m, &samples, &cfg(k)).map_err(|e| e.to_string())?;
        ensure!(hist[0].active_ids == (0..n).collect::<Vec<_>>(), "K {k}: epoch 0 not the full set");
        for e in 1..hist.len() {
            let want = (k as usize * n).div_ceil(100);
            ensure!(hist[e].active_ids.len() == want, "K {k} epoch {e}: {} active, want {want}", hist[e].active_ids.len());
            ensure!(hist[e].active_ids == select_topk(&hist[e - 1].scores, k), "K {k} epoch {e}: not the top scores");
        }
    }
    let hash = base.param_hash();
    score_samples(&base, &samples, LossResolution::Coarse).map_err(|e| e.to_string())?;
    ensure!(base.param_hash() == hash, "scoring changed the parameters");

    let mut active = base.clone();
    active_train(&mut active, &samples, &cfg(100.0)).map_err(|e| e.to_string())?;
    let mut plain = base.clone();
    let all: Vec<usize> = (0..n).collect();
    for e in 0..3 {
        train_epoch(&mut plain, &samples, &all, &cfg(100.0), e).map_err(|e| e.to_string())?;
    }
    ensure!(active.param_hash() == plain.param_hash(), "K = 100 diverged from standard training");
    Ok(format!("sizes exact for n in 1..=50; n={n} histories follow ceil(K n/100); scoring hash stable; K=100 == standard"))
}

// 8 ------------------------------------------------------------------------

fn enrichment() -> Check {
    let cfg = PipelineConfig::default().for_classes(3);
    let mut model = Model::init(&cfg.model).map_err(|e| e.to_string())?;
    let scenes = synthesize(&SynthOptions { preset: Preset::Tiny, samples: 50, seed: Some(1000), hard_every: 5 })
        .map_err(|e| e.to_string())?;
    let hard: BTreeSet<usize> = scenes.iter().enumerate().filter(|(_, s)| s.1).map(|(i, _)| i).collect();
    let base = hard.len() as f64 / scenes.len() as f64;
    ensure!(hard.len() == 10, "{} hard samples generated", hard.len());
    let samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .map(|(i, (s, _))| prepare_scene(i, s, &cfg, &model))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let tcfg = TrainingConfig { epochs: 2, k_percent: 70.0, ..cfg.training.clone() };
    let hist = active_train(&mut model, &samples, &tcfg).map_err(|e| e.to_string())?;
    let active = select_topk(&hist[1].scores, 70.0);
    let n_hard = active.iter().filter(|i| hard.contains(i)).count();
    let frac = n_hard as f64 / active.len() as f64;
    ensure!(frac > base, "hard fraction {frac:.3} ({n_hard}/{}) does not exceed {base:.2}", active.len());
    Ok(format!("{n_hard}/{} hard in the active set: {frac:.3} > {base:.2}", active.len()))
}

// 9 ------------------------------------------------------------------------

fn learning() -> Check {
    let scene = Scene::generate(&Preset::Tiny.fixture()).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default().for_classes(scene.spec.n_class);
    let mut model = Model::init(&cfg.model).map_err(|e| e.to_string())?;
    let s = prepare_scene(0, &scene, &cfg, &model).map_err(|e| e.to_string())?;
    let initial = sample_loss(&model, &s, LossResolution::Coarse).map_err(|e| e.to_string())?.total;
    let samples = [s];
    for step in 0..200 {
        train_epoch(&mut model, &samples, &[0], &cfg.training, step).map_err(|e| e.to_string())?;
    }
    let s = &samples[0];
    let last = sample_loss(&model, s, LossResolution::Coarse).map_err(|e| e.to_string())?.total;
    let pred = predict(&model, s, &cfg.decoder).map_err(|e| e.to_string())?;
    let miou = pred.report.coarse_metrics.miou;

    let mut counts = [0usize; 256];
    s.coarse_labels.iter().for_each(|&l| counts[l as usize] += 1);
    let majority = (0..256).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap() as u8;
    let dims = s.grid.coarse_dims();
    let cs = s.grid.coarse_voxel_size();
    let mut gt = OccupancyGrid::empty(dims, cs, s.grid.min_corner);
    gt.labels.clone_from(&s.coarse_labels);
    let mut constant = gt.clone();
    constant.labels.iter_mut().for_each(|l| *l = majority);
    let baseline = iou_miou(&constant, &gt).map_err(|e| e.to_string())?.miou;

    let ratio = last / initial;
    let summary = format!("loss {initial:.4} -> {last:.4} (ratio {ratio:.3}), coarse mIoU {miou:.3} vs majority-class {baseline:.3}");
    ensure!(ratio <= 0.5 && miou > baseline, "{summary}");
    Ok(summary)
}

// 10 -----------------------------------------------------------------------

fn loss_identities() -> Check {
    let n_class = 4;
    let labels: Vec<u8> = vec![0, 1, 2, 3, 1, 0];
    let mut perfect = vec![0.0; labels.len() * n_class];
    for (v, &l) in labels.iter().enumerate() {
        perfect[v * n_class + l as usize] = 1.0;
    }
    let (b, _) = total_loss(&perfect, n_class, &labels).map_err(|e| e.to_string())?;
    ensure!(
        [b.ce, b.lovasz, b.scal_geo, b.scal_sem, b.total].iter().all(|&v| v == 0.0),
        "perfect predictions: {b:?}"
    );
    for n in 2..=8usize {
        let labels: Vec<u8> = (0..10).map(|i| (i % n) as u8).collect();
        let uniform = vec![1.0 / n as f64; 10 * n];
        let ce = cross_entropy(&uniform, n, &labels).map_err(|e| e.to_string())?.value;
        ensure!((ce - (n as f64).ln()).abs() <= 1e-12, "uniform CE {ce} vs ln {n}");
    }
    // occupied-class probabilities (1, 1, 0.5, 0), occupancy (1, 0, 1, 0)
    let probs = [0.0, 1.0, 0.0, 1.0, 0.5, 0.5, 1.0, 0.0];
    let geo = scal_losses(&probs, 2, &[1, 0, 1, 0]).map_err(|e| e.to_string())?.0.value;
    let summary = format!("perfect = 0 exactly; uniform CE = ln N; hand case scal_geo = {geo:.6} (target 0.5172 +- 1e-4)");
    ensure!((geo - 0.5172).abs() <= 1e-4, "{summary}");
    Ok(summary)
}

// 11 -----------------------------------------------------------------------

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let ds = root.join("ds");
    let ds_s = ds.to_str().unwrap().to_string();
    run_cli(&["synth", "--preset", "tiny", "--samples", "3", "--seed", "11", "--hard-every", "3"], 1, &ds)?;
    let gt = ds.join("sample_0001").join("gt.occg");
    let pred_dir = root.join("pred_ref");
    run_cli(&["predict", &ds_s, "--sample", "1", "--seed", "2"], 1, &pred_dir)?;
    let pred = pred_dir.join("pred.occg");

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth".into(), "--preset".into(), "tiny".into(), "--samples".into(), "3".into(), "--seed".into(), "11".into(), "--hard-every".into(), "3".into()]),
        ("preprocess", vec!["preprocess".into(), ds_s.clone(), "--seed".into(), "4".into()]),
        ("fuse", vec!["fuse".into(), ds_s.clone(), "--seed".into(), "4".into()]),
        ("predict", vec!["predict".into(), ds_s.clone(), "--sample".into(), "1".into(), "--seed".into(), "2".into()]),
        ("train", vec!["train".into(), ds_s.clone(), "--epochs".into(), "2".into(), "--k-percent".into(), "70".into(), "--seed".into(), "4".into()]),
        ("eval", vec!["eval".into(), pred.to_str().unwrap().into(), gt.to_str().unwrap().into()]),
        ("bench", vec!["bench".into(), "--dataset".into(), ds_s.clone(), "--seed".into(), "1".into()]),
    ];
    let mut files = 0;
    for (name, args) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let runs: Vec<Vec<(String, Vec<u8>)>> = [1usize, 1, 4]
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let out = root.join(format!("{name}_{i}"));
                run_cli(&args, t, &out).map(|_| tree_bytes(&out))
            })
            .collect::<Result<_, _>>()?;
        ensure!(!runs[0].is_empty(), "{name} wrote nothing");
        ensure!(runs[0] == runs[1], "{name}: artifacts differ between identical runs");
        ensure!(runs[0] == runs[2], "{name}: artifacts differ between 1 and 4 threads");
        files += runs[0].len();
    }
    // predict then eval reproduces the in-process metrics
    let eval_metrics = std::fs::read(root.join("eval_0").join("metrics.json")).unwrap();
    let pred_metrics = std::fs::read(pred_dir.join("metrics.json")).unwrap();
    ensure!(eval_metrics == pred_metrics, "eval of the written prediction differs from predict's metrics");
    Ok(format!("7 subcommands, {files} artifacts byte-identical across runs and threads 1/4"))
}

//! Fixtures shared by the benchmarks.

use rand::Rng;

use occkit_core::pipeline::{prepare_scene, PipelineConfig};
use occkit_core::rng::stream_rng;
use occkit_core::training::Sample;
use occkit_core::{Model, Preset, Scene, Vec3};

/// `n` points uniform in the unit cube.
pub fn random_cloud(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = stream_rng(seed, 0);
    (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.0..1.0))).collect()
}

/// A prepared preset fixture and a model sized for it. Seed 1 gives a
/// non-empty refinement candidate set on both presets.
pub fn fixture(preset: Preset) -> (Model, Sample, PipelineConfig) {
    let scene = Scene::generate(&preset.fixture()).expect("preset fixture is valid");
    let cfg = PipelineConfig::default().for_classes(scene.spec.n_class).with_seed(1);
    let model = Model::init(&cfg.model).expect("default model config is valid");
    let sample = prepare_scene(0, &scene, &cfg, &model).expect("fixture prepares");
    (model, sample, cfg)
}

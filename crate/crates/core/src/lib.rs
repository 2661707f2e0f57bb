//! Depth-free LiDAR-camera fusion for 3D semantic occupancy prediction.

mod error;
pub mod linalg;
pub mod rng;

pub mod cameras;
pub mod cloud;
pub mod decoder;
pub mod encoders;
pub mod fusion;
pub mod grid;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod pointprep;
pub mod scenes;
pub mod training;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

pub use cameras::{CameraModel, FeatureMap, FeatureMapSet, Rig};
pub use cloud::{LidarPoint, PointCloud};
pub use decoder::{DecoderConfig, Heads, Metrics, OpCountReport};
pub use fusion::{AttentionParams, FusionConfig};
pub use grid::{GridConfig, OccupancyGrid, VoxelFeatureVolume};
pub use model::{Model, ModelConfig};
pub use pipeline::{Dataset, PipelineConfig};
pub use pointprep::{PreprocessConfig, ReferencePointSet};
pub use scenes::{Preset, Scene, SceneSpec};
pub use training::{EpochRecord, TrainingConfig};

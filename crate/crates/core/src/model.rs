//! The full learnable model, its gradients, hashing and checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (config plus tensor
//! shapes) and one raw little-endian f64 file per tensor, named by parameter
//! path, e.g. `fusion.head0.w_out.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::Heads;
use crate::encoders::EncoderParams;
use crate::fusion::{AttentionParams, FusionConfig};
use crate::linalg::Mat;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_heads: usize,
    pub n_keys: usize,
    pub n_class: usize,
    pub image_stride: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        ModelConfig {
            channels: f.channels,
            n_heads: f.n_heads,
            n_keys: f.n_keys,
            n_class: 3,
            image_stride: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            channels: self.channels,
            n_heads: self.n_heads,
            n_keys: self.n_keys,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.n_heads == 0 || self.n_keys == 0 {
            return Err(Error::Config("channels, n_heads and n_keys must be positive".into()));
        }
        if !(2..=256).contains(&self.n_class) {
            return Err(Error::Config(format!("n_class {} outside [2, 256]", self.n_class)));
        }
        if self.image_stride == 0 {
            return Err(Error::Config("image_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Encoders (frozen), fusion attention and classification heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub fusion: AttentionParams,
    pub heads: Heads,
}

/// Gradients of the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub fusion: AttentionParams,
    pub heads: Heads,
}

impl Grads {
    pub fn zeros_for(model: &Model) -> Self {
        Grads {
            fusion: model.fusion.zeros_like(),
            heads: model.heads.zeros_like(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Grads) {
        self.fusion.axpy(alpha, &other.fusion);
        for ((_, a), (_, b)) in self.heads.tensors_mut().into_iter().zip(other.heads.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = self
            .fusion
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("fusion.{n}"), t))
            .collect();
        out.extend(self.heads.tensors().into_iter().map(|(n, t)| (format!("heads.{n}"), t)));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "occkit-checkpoint";

impl Model {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            encoder: EncoderParams::seeded(config.channels, config.image_stride, config.seed),
            fusion: AttentionParams::init(&config.fusion()),
            heads: Heads::init(config.channels, config.n_class, config.seed),
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("encoder.point_embed".to_string(), &self.encoder.point_embed),
            ("encoder.voxel_mix".to_string(), &self.encoder.voxel_mix),
            ("encoder.pixel_embed".to_string(), &self.encoder.pixel_embed),
        ];
        out.extend(self.fusion.tensors().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)));
        out.extend(self.heads.tensors().into_iter().map(|(n, t)| (format!("heads.{n}"), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("encoder.point_embed".to_string(), &mut self.encoder.point_embed),
            ("encoder.voxel_mix".to_string(), &mut self.encoder.voxel_mix),
            ("encoder.pixel_embed".to_string(), &mut self.encoder.pixel_embed),
        ];
        out.extend(self.fusion.tensors_mut().into_iter().map(|(n, t)| (format!("fusion.{n}"), t)));
        out.extend(self.heads.tensors_mut().into_iter().map(|(n, t)| (format!("heads.{n}"), t)));
        out
    }

    /// Gradient-descent step on the trainable parameters.
    pub fn apply(&mut self, grads: &Grads, learning_rate: f64) {
        self.fusion.axpy(-learning_rate, &grads.fusion);
        for ((_, p), (_, g)) in self.heads.tensors_mut().into_iter().zip(grads.heads.tensors()) {
            p.axpy(-learning_rate, g);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.heads.validate()?;
        if self.fusion.channels != self.config.channels || self.heads.n_class() != self.config.n_class {
            return Err(Error::Shape("model parts disagree with the model config".into()));
        }
        Ok(())
    }

    /// SHA-256 over every tensor's name, shape and little-endian bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            let file = format!("{name}.bin");
            let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(TensorEntry {
                name,
                rows: t.rows,
                cols: t.cols,
                file,
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            tensors: entries,
        };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(Error::format("checkpoint", format!("unsupported {} v{}", manifest.format, manifest.version)));
        }
        let mut model = Model::init(&manifest.config)?;
        let mut seen = 0;
        for (name, t) in model.tensors_mut() {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if (entry.rows, entry.cols) != (t.rows, t.cols) {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint {}x{}, model {}x{}",
                    entry.rows, entry.cols, t.rows, t.cols
                )));
            }
            let p = dir.join(&entry.file);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if bytes.len() != t.data.len() * 8 {
                return Err(Error::format("checkpoint", format!("{}: expected {} bytes", p.display(), t.data.len() * 8)));
            }
            for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            seen += 1;
        }
        if seen != manifest.tensors.len() {
            return Err(Error::format("checkpoint", "unexpected extra tensors"));
        }
        model.validate()?;
        Ok(model)
    }
}

//! Checkpoint directories: `manifest.json` plus little-endian `weights.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Dataset;
use crate::backbone::{DynamicParams, ViTConfig, ViTParams};
use crate::error::{Error, Result};
use crate::inference::PruneSchedule;
use crate::params::ParamTree;
use crate::tensorcore::Tensor;

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

/// Per-channel input statistics the weights were trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalisation {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalisation {
    pub fn of(d: &Dataset) -> Self {
        Normalisation {
            mean: d.mean.clone(),
            std: d.std.clone(),
        }
    }

    pub fn apply(&self, mut d: Dataset) -> Dataset {
        if self.mean.len() == d.channels && self.std.len() == d.channels {
            d.mean = self.mean.clone();
            d.std = self.std.clone();
        }
        d
    }
}

/// Everything stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schedule: Option<PruneSchedule>,
    pub config: Option<TrainConfig>,
    pub normalisation: Option<Normalisation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model: ViTConfig,
    /// Number of prediction modules (0 for a plain backbone).
    pub stages: usize,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: DynamicParams,
}

impl Checkpoint {
    pub fn model(&self) -> &ViTConfig {
        &self.manifest.model
    }
}

/// A plain backbone as a stage-free [`DynamicParams`].
pub fn backbone_only(vit: ViTParams, cfg: &ViTConfig) -> DynamicParams {
    DynamicParams {
        vit,
        predictors: Vec::new(),
        static_logits: Tensor::zeros([0, cfg.num_patches()]),
    }
}

pub fn save_checkpoint(
    dir: &Path,
    params: &DynamicParams,
    model: &ViTConfig,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    params.visit_named("", &mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        model: model.clone(),
        stages: params.stages(),
        meta: meta.clone(),
        tensors,
    };
    fs::write(dir.join(WEIGHTS), bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "schema version {} (expected {CHECKPOINT_SCHEMA})",
            manifest.schema_version
        )));
    }
    manifest.model.validate()?;
    let weights_path = dir.join(WEIGHTS);
    let bytes = fs::read(&weights_path)?;
    let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        if by_name.insert(&e.name, e).is_some() {
            return Err(Error::Checkpoint(format!("tensor {} listed twice", e.name)));
        }
    }

    // Build the expected structure, then fill it by name.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vit = ViTParams::init(&mut rng, &manifest.model)?;
    let mut params = DynamicParams::from_backbone(&mut rng, vit, &manifest.model, manifest.stages);
    if manifest.stages == 0 {
        params = backbone_only(params.vit, &manifest.model);
    }
    let mut err: Option<Error> = None;
    let mut used = 0;
    params.visit_named_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(e) = by_name.get(name) else {
            err = Some(Error::Checkpoint(format!("missing tensor {name}")));
            return;
        };
        if e.shape != t.shape() {
            err = Some(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                e.shape,
                t.shape()
            )));
            return;
        }
        let end = e.offset + 8 * t.numel();
        let Some(raw) = bytes.get(e.offset..end) else {
            err = Some(Error::Truncated {
                path: weights_path.clone(),
                expected: end,
                found: bytes.len(),
            });
            return;
        };
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        used += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in manifest, model has {used}",
            manifest.tensors.len()
        )));
    }
    Ok(Checkpoint { manifest, params })
}

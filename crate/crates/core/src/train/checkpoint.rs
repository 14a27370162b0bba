//! `manifest.json` describing the model plus `params.bin` holding every
//! parameter value, little-endian, concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Precision, Real, Tensor};
use crate::data::{NormalizationStats, TrajectoryScene};
use crate::error::{Error, Result};
use crate::graph::OccupancyGrid;
use crate::model::{prepare_scenes, Granp, ModelConfig, Predictor, PreparedScene};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// Where the stored parameters came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub precision: Precision,
    pub config: ModelConfig,
    pub stats: NormalizationStats,
    pub params: Vec<ParamEntry>,
    /// Archive indices of the reference context scenes.
    pub reference_ids: Vec<usize>,
    /// The reference context itself, raw, so inference needs no dataset.
    pub reference: Vec<TrajectoryScene>,
    pub training: Option<TrainingSummary>,
}

/// A model ready for inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<R: Real> {
    pub model: Granp,
    pub store: ParamStore<R>,
    pub stats: NormalizationStats,
    pub reference_ids: Vec<usize>,
    pub reference: Vec<TrajectoryScene>,
    pub training: Option<TrainingSummary>,
}

/// Manifest entries and blob bytes for `store`.
pub fn encode_params<R: Real>(store: &ParamStore<R>) -> (Vec<ParamEntry>, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_values() * R::PRECISION.bytes());
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
    }
    (entries, blob)
}

/// Values of `entries` read from `blob` stored at `precision`.
pub fn decode_params<R: Real>(
    entries: &[ParamEntry],
    blob: &[u8],
    precision: Precision,
) -> Result<Vec<Tensor<R>>> {
    let width = precision.bytes();
    let mut expected = 0;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.offset != expected {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` at byte {} but the previous one ends at {expected}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "parameter blob truncated: `{}` needs bytes {}..{end}, blob has {}",
                e.name,
                e.offset,
                blob.len()
            )));
        }
        let bytes = &blob[e.offset..end];
        let values: Vec<R> = match precision {
            Precision::F32 => bytes
                .chunks_exact(4)
                .map(|c| R::from_f64(f32::read_le(c) as f64))
                .collect(),
            Precision::F64 => bytes
                .chunks_exact(8)
                .map(|c| R::from_f64(f64::read_le(c)))
                .collect(),
        };
        out.push(Tensor::new(e.shape.clone(), values)?);
        expected = end;
    }
    if expected != blob.len() {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, manifest accounts for {expected}",
            blob.len()
        )));
    }
    Ok(out)
}

impl<R: Real> Checkpoint<R> {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: CHECKPOINT_VERSION,
            precision: R::PRECISION,
            config: self.model.config,
            stats: self.stats,
            params: encode_params(&self.store).0,
            reference_ids: self.reference_ids.clone(),
            reference: self.reference.clone(),
            training: self.training.clone(),
        }
    }

    /// Writes `dir/manifest.json` and `dir/params.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (params, blob) = encode_params(&self.store);
        let manifest = Manifest {
            params,
            ..self.manifest()
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, blob).map_err(|e| Error::io(&path, e))
    }

    /// Reads a checkpoint directory. Values stored at another precision are
    /// converted on load.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let path = dir.join(PARAMS_FILE);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_parts(manifest, &blob)
    }

    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {}, this build reads version {CHECKPOINT_VERSION}",
                manifest.version
            )));
        }
        let (model, mut store) = Granp::init::<R>(manifest.config, 0)?;
        if store.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, the configured model has {}",
                manifest.params.len(),
                store.len()
            )));
        }
        let values = decode_params::<R>(&manifest.params, blob, manifest.precision)?;
        let ids: Vec<_> = store.ids().collect();
        for ((id, entry), value) in ids.into_iter().zip(&manifest.params).zip(values) {
            let p = store.get(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "manifest entry `{}` {:?} does not match model parameter `{}` {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            *store.value_mut(id) = value;
        }
        Ok(Checkpoint {
            model,
            store,
            stats: manifest.stats,
            reference_ids: manifest.reference_ids,
            reference: manifest.reference,
            training: manifest.training,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.model.config
    }

    pub fn prepare(&self, scenes: &[TrajectoryScene]) -> Result<Vec<PreparedScene>> {
        prepare_scenes(scenes, &self.stats, &OccupancyGrid::default())
    }

    /// Predictor conditioned on the stored reference context.
    pub fn predictor(&self) -> Result<Predictor<'_, R>> {
        let context = self.prepare(&self.reference)?;
        let refs: Vec<&PreparedScene> = context.iter().collect();
        Predictor::new(&self.model, &self.store, self.stats, &refs)
    }
}

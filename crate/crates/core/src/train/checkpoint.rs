//! `UBEC` checkpoints: shared weights, registry, optimizer moments and a
//! JSON trailer with the configuration and its hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::format::{read_file, Archive};
use crate::model::{EncoderConfig, EncoderModel};
use crate::registry::Registry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::engine::{EmbeddingMoments, ModelState, OptimizerState, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: String,
    backbone: BackboneConfig,
    encoder: EncoderConfig,
    train: TrainConfig,
    config_hash: String,
    step: u64,
    shared_step: u64,
    row_steps: BTreeMap<String, Vec<u64>>,
    registry: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub state: ModelState<T>,
    pub train: TrainConfig,
    pub config_hash: String,
}

/// SHA-256 over the canonical JSON of the three configurations.
pub fn config_hash(bb: &BackboneConfig, enc: &EncoderConfig, train: &TrainConfig) -> String {
    let json = serde_json::json!({ "backbone": bb, "encoder": enc, "train": train });
    hex::encode(Sha256::digest(json.to_string().as_bytes()))
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

pub fn checkpoint_bytes<T: Scalar>(state: &ModelState<T>, train: &TrainConfig) -> Result<Vec<u8>> {
    let bb = &state.model.backbone.config;
    let enc = &state.model.encoder;
    let mut ar: Archive<T> = Archive::new(serde_json::Value::Null);
    for (name, t) in state.model.weights.named() {
        ar.push(format!("shared/{name}"), t.clone());
    }
    let registry = state.registry.write_into(&mut ar);
    let opt = &state.optimizer;
    for (name, t) in opt.shared_m.named() {
        ar.push(format!("adam/m/{name}"), t.clone());
    }
    for (name, t) in opt.shared_v.named() {
        ar.push(format!("adam/v/{name}"), t.clone());
    }
    let mut row_steps = BTreeMap::new();
    for e in &opt.embeddings {
        ar.push(format!("adam/m/embeddings/{}", e.subject_id), e.m.clone());
        ar.push(format!("adam/v/embeddings/{}", e.subject_id), e.v.clone());
        row_steps.insert(e.subject_id.clone(), e.t.clone());
    }
    let meta = Meta {
        kind: "checkpoint".into(),
        backbone: bb.clone(),
        encoder: enc.clone(),
        train: train.clone(),
        config_hash: config_hash(bb, enc, train),
        step: state.step,
        shared_step: opt.shared_t,
        row_steps,
        registry,
    };
    ar.metadata = serde_json::to_value(meta)?;
    ar.to_bytes()
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, train: &TrainConfig, path: &Path) -> Result<()> {
    crate::format::write_file(path, &checkpoint_bytes(state, train)?)
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let ar: Archive<T> = Archive::from_bytes(bytes)?;
    let meta: Meta = serde_json::from_value(ar.metadata.clone())
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(Error::Format(format!("archive holds a {:?}, not a checkpoint", meta.kind)));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model: EncoderModel<T> = EncoderModel::new(meta.backbone.clone(), meta.encoder.clone(), &mut rng)?;
    let fill = |prefix: &str, w: &mut crate::model::SharedWeights<T>| -> Result<()> {
        for (name, t) in w.named_mut() {
            let src = ar.get(&format!("{prefix}{name}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!("{prefix}{name}: shape {:?}, expected {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
        }
        Ok(())
    };
    fill("shared/", &mut model.weights)?;
    let registry = Registry::read_from(&ar, &meta.registry)?;
    let mut optimizer = OptimizerState::new(&model.weights);
    fill("adam/m/", &mut optimizer.shared_m)?;
    fill("adam/v/", &mut optimizer.shared_v)?;
    optimizer.shared_t = meta.shared_step;
    for s in registry.subjects() {
        let id = &s.subject_id;
        let get = |k: &str| -> Result<Tensor<T>> { Ok(ar.get(&format!("adam/{k}/embeddings/{id}"))?.clone()) };
        let t = meta.row_steps.get(id).cloned().unwrap_or_else(|| vec![0; s.voxel_count]);
        optimizer.embeddings.push(EmbeddingMoments { subject_id: id.clone(), m: get("m")?, v: get("v")?, t });
    }
    Ok(Checkpoint {
        state: ModelState { model, registry, optimizer, step: meta.step },
        train: meta.train,
        config_hash: meta.config_hash,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    checkpoint_from_bytes(&read_file(path)?)
}

impl<T: Scalar> Checkpoint<T> {
    /// Warning text when resuming with a configuration other than the one
    /// the checkpoint was written with. Also logged.
    pub fn resume_warning(&self, train: &TrainConfig) -> Option<String> {
        let now = config_hash(&self.state.model.backbone.config, &self.state.model.encoder, train);
        if now == self.config_hash {
            return None;
        }
        let msg = format!("config hash {now} differs from checkpoint's {}", self.config_hash);
        log::warn!("{msg}");
        Some(msg)
    }
}

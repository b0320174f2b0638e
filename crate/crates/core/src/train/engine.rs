//! Joint training, embeddings-only transfer and the optimizer state.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::backbone::BackboneConfig;
use crate::error::{ensure, Error, Result};
use crate::model::{collect_weight_grads, record_forward, EncoderConfig, EncoderModel, GradientMask, SharedWeights};
use crate::registry::Registry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::adam::{adam_update, AdamConfig};
use crate::train::data::TrainingData;
use crate::train::sampler::{epoch_batches, make_item, BatchItem};

const TAG_WEIGHTS: u64 = 0x7765_6967;
const TAG_REGISTRY: u64 = 0x7265_6769;
const TAG_SAMPLER: u64 = 0x7361_6d70;

/// Which parameters an optimization run may change.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Shared weights and every subject's embeddings.
    All,
    /// Every subject's embeddings; shared weights frozen.
    EmbeddingsOnly,
    /// Only the listed subjects' embeddings.
    Subjects(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub batch_images: usize,
    pub voxels_per_image: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub trainable: Trainable,
    /// Advance every row of a trainable table each step, sampled or not.
    pub dense_adam: bool,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub freeze_level_projections: bool,
    /// Z-score responses per run when loading data.
    pub zscore: bool,
    /// Call the evaluation hook every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            lr: 1e-3,
            batch_images: 32,
            voxels_per_image: 5000,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            trainable: Trainable::All,
            dense_adam: false,
            clip_norm: 0.0,
            freeze_level_projections: false,
            zscore: true,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.alpha), Config, "alpha must lie in [0, 1], got {}", self.alpha);
        ensure!(self.lr > 0.0 || self.lr == 0.0, Config, "lr must be non-negative, got {}", self.lr);
        ensure!(self.batch_images >= 1, Config, "batch_images must be >= 1");
        ensure!(self.voxels_per_image >= 1, Config, "voxels_per_image must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "eps must be positive");
        ensure!(self.clip_norm >= 0.0, Config, "clip_norm must be non-negative");
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    fn shared_trainable(&self) -> bool {
        self.trainable == Trainable::All
    }

    fn subject_trainable(&self, subject_id: &str) -> bool {
        match &self.trainable {
            Trainable::All | Trainable::EmbeddingsOnly => true,
            Trainable::Subjects(ids) => ids.iter().any(|s| s == subject_id),
        }
    }
}

/// Adam moments for one embedding table; `t` counts steps per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMoments<T> {
    pub subject_id: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub shared_m: SharedWeights<T>,
    pub shared_v: SharedWeights<T>,
    pub shared_t: u64,
    pub embeddings: Vec<EmbeddingMoments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &SharedWeights<T>) -> Self {
        OptimizerState { shared_m: weights.zeros_like(), shared_v: weights.zeros_like(), shared_t: 0, embeddings: Vec::new() }
    }

    /// Adds zeroed moments for subjects registered since the last call.
    pub fn sync(&mut self, registry: &Registry<T>) {
        for s in registry.subjects() {
            if self.embeddings.iter().all(|e| e.subject_id != s.subject_id) {
                self.embeddings.push(EmbeddingMoments {
                    subject_id: s.subject_id.clone(),
                    m: Tensor::zeros(s.embeddings.shape()),
                    v: Tensor::zeros(s.embeddings.shape()),
                    t: vec![0; s.voxel_count],
                });
            }
        }
    }

    fn moments_mut(&mut self, subject_id: &str) -> &mut EmbeddingMoments<T> {
        self.embeddings
            .iter_mut()
            .find(|e| e.subject_id == subject_id)
            .expect("optimizer synced with registry")
    }
}

/// Everything training reads and writes.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub model: EncoderModel<T>,
    pub registry: Registry<T>,
    pub optimizer: OptimizerState<T>,
    pub step: u64,
}

/// Generator for a subject's initial embeddings; depends only on the seed
/// and the subject id.
pub fn subject_rng(seed: u64, subject_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(subject_id.as_bytes());
    let mut idx = [0u8; 8];
    idx.copy_from_slice(&digest[..8]);
    crate::backbone::component_rng(seed, TAG_REGISTRY, u64::from_le_bytes(idx))
}

impl<T: Scalar> ModelState<T> {
    /// Fresh weights and an empty registry.
    pub fn new(bb: BackboneConfig, enc: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::backbone::component_rng(seed, TAG_WEIGHTS, 0);
        let model = EncoderModel::new(bb, enc.clone(), &mut rng)?;
        let optimizer = OptimizerState::new(&model.weights);
        Ok(ModelState { model, registry: Registry::new(enc.embedding_dim), optimizer, step: 0 })
    }

    /// Fresh weights with every subject in `data` registered.
    pub fn init(bb: BackboneConfig, enc: EncoderConfig, data: &TrainingData<T>, seed: u64) -> Result<Self> {
        let mut st = Self::new(bb, enc, seed)?;
        st.register_all(data, seed)?;
        Ok(st)
    }

    /// Registers the subjects of `data`; all must be new.
    pub fn register_all(&mut self, data: &TrainingData<T>, seed: u64) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for s in &data.subjects {
            let mut rng = subject_rng(seed, &s.subject_id);
            self.registry.register_subject(&s.subject_id, &s.dataset_id, s.voxel_count, &mut rng)?;
            ids.push(s.subject_id.clone());
        }
        self.optimizer.sync(&self.registry);
        Ok(ids)
    }

    /// Rounds weights and embeddings to 32-bit values.
    pub fn round_f32(&mut self) {
        self.model.weights.round_f32();
        self.registry.round_f32();
    }

    pub fn predict(&self, data: &TrainingData<T>, stimulus: usize, subject_id: &str) -> Result<Vec<T>> {
        self.model.predict_fmri(&data.raw[stimulus], subject_id, &self.registry)
    }
}

/// Batch-mean loss and gradients. Embedding gradients are sparse: per
/// subject id, per sampled row.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: T,
    pub shared: Option<SharedWeights<T>>,
    pub embeddings: BTreeMap<String, BTreeMap<usize, Vec<T>>>,
}

struct ItemGrad<T> {
    loss: T,
    shared: Option<SharedWeights<T>>,
    embeddings: Option<Tensor<T>>,
}

fn gather<T: Scalar>(table: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let e = table.cols();
    let mut d = Vec::with_capacity(rows.len() * e);
    for &r in rows {
        d.extend_from_slice(table.row(r));
    }
    Tensor::matrix(rows.len(), e, d).expect("gathered rows are consistent")
}

fn item_gradients<T: Scalar>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    item: &BatchItem<T>,
    cfg: &TrainConfig,
) -> Result<ItemGrad<T>> {
    let subject_id = &data.subjects[item.subject].subject_id;
    let table = &state.registry.subject(subject_id)?.embeddings;
    let mask = GradientMask {
        shared: cfg.shared_trainable(),
        level_projections: !cfg.freeze_level_projections,
        embeddings: cfg.subject_trainable(subject_id),
    };
    let mut tape = Tape::new();
    let rec = record_forward(
        &mut tape,
        &state.model.backbone,
        &data.raw[item.stimulus],
        gather(table, &item.voxels),
        &state.model.weights,
        mask,
    )?;
    let loss = tape.combined_loss(rec.predictions, &item.target, T::lit(cfg.alpha))?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at step {} (subject {subject_id:?}, stimulus {})",
            state.step + 1,
            data.stimulus_ids.get(item.stimulus).map(String::as_str).unwrap_or("?")
        )));
    }
    if !mask.shared && !mask.embeddings {
        return Ok(ItemGrad { loss: value, shared: None, embeddings: None });
    }
    let mut grads = tape.backward(loss)?;
    let shared = mask.shared.then(|| collect_weight_grads(&mut grads, &rec.weights, &state.model.weights));
    let embeddings = if mask.embeddings { grads.take(rec.embeddings) } else { None };
    Ok(ItemGrad { loss: value, shared, embeddings })
}

/// Loss and gradients of the mean per-image loss over `batch`.
pub fn batch_gradients<T: Scalar>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    batch: &[BatchItem<T>],
    cfg: &TrainConfig,
) -> Result<BatchGradients<T>> {
    ensure!(!batch.is_empty(), Config, "empty batch");
    let items: Vec<Result<ItemGrad<T>>> = batch.par_iter().map(|it| item_gradients(state, data, it, cfg)).collect();
    let inv = T::one() / T::lit(batch.len() as f64);
    let mut loss = T::zero();
    let mut shared: Option<SharedWeights<T>> = None;
    let mut embeddings: BTreeMap<String, BTreeMap<usize, Vec<T>>> = BTreeMap::new();
    for (item, g) in batch.iter().zip(items) {
        let g = g?;
        loss = loss + g.loss;
        if let Some(s) = g.shared {
            match &mut shared {
                Some(acc) => acc.add_assign(&s)?,
                None => shared = Some(s),
            }
        }
        if let Some(e) = g.embeddings {
            let rows = embeddings.entry(data.subjects[item.subject].subject_id.clone()).or_default();
            for (k, &v) in item.voxels.iter().enumerate() {
                let acc = rows.entry(v).or_insert_with(|| vec![T::zero(); e.cols()]);
                for (a, &x) in acc.iter_mut().zip(e.row(k)) {
                    *a = *a + x;
                }
            }
        }
    }
    if let Some(s) = &mut shared {
        s.scale(inv);
    }
    for rows in embeddings.values_mut() {
        for r in rows.values_mut() {
            r.iter_mut().for_each(|x| *x = *x * inv);
        }
    }
    Ok(BatchGradients { loss: loss * inv, shared, embeddings })
}

fn clip<T: Scalar>(g: &mut BatchGradients<T>, max_norm: f64) {
    let mut sq = 0.0;
    if let Some(s) = &g.shared {
        for (_, t) in s.named() {
            sq += t.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    for rows in g.embeddings.values() {
        for r in rows.values() {
            sq += r.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        if let Some(sh) = &mut g.shared {
            sh.scale(s);
        }
        for rows in g.embeddings.values_mut() {
            for r in rows.values_mut() {
                r.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
}

/// One Adam step from precomputed gradients.
pub fn apply_gradients<T: Scalar>(state: &mut ModelState<T>, mut g: BatchGradients<T>, cfg: &TrainConfig) -> Result<()> {
    if cfg.clip_norm > 0.0 {
        clip(&mut g, cfg.clip_norm);
    }
    let adam = cfg.adam();
    state.step += 1;
    state.optimizer.sync(&state.registry);
    if let Some(grads) = &g.shared {
        let opt = &mut state.optimizer;
        opt.shared_t += 1;
        let t = opt.shared_t;
        let params = state.model.weights.named_mut();
        let ms = opt.shared_m.named_mut();
        let vs = opt.shared_v.named_mut();
        for ((((name, p), (_, gr)), (_, m)), (_, v)) in params.into_iter().zip(grads.named()).zip(ms).zip(vs) {
            if cfg.freeze_level_projections && name.starts_with("level_proj/") {
                continue;
            }
            adam_update(p.data_mut(), gr.data(), m.data_mut(), v.data_mut(), t, &adam);
        }
    }
    let dense_subjects: Vec<String> = if cfg.dense_adam {
        state
            .registry
            .subjects()
            .iter()
            .filter(|s| cfg.subject_trainable(&s.subject_id))
            .map(|s| s.subject_id.clone())
            .collect()
    } else {
        Vec::new()
    };
    for id in dense_subjects {
        g.embeddings.entry(id).or_default();
    }
    for (id, rows) in &g.embeddings {
        let table = &mut state.registry.subject_mut(id)?.embeddings;
        let mom = state.optimizer.moments_mut(id);
        let e = table.cols();
        let zeros = vec![T::zero(); e];
        let update_row = |r: usize, grad: &[T], table: &mut Tensor<T>, mom: &mut EmbeddingMoments<T>| {
            mom.t[r] += 1;
            let t = mom.t[r];
            let (m, v) = (&mut mom.m, &mut mom.v);
            adam_update(table.row_mut(r), grad, m.row_mut(r), v.row_mut(r), t, &adam);
        };
        if cfg.dense_adam {
            for r in 0..table.rows() {
                update_row(r, rows.get(&r).map(Vec::as_slice).unwrap_or(&zeros), table, mom);
            }
        } else {
            for (&r, grad) in rows {
                update_row(r, grad, table, mom);
            }
        }
    }
    Ok(())
}

/// Forward, backward and one optimizer step; returns the batch-mean loss.
pub fn train_step<T: Scalar>(
    state: &mut ModelState<T>,
    data: &TrainingData<T>,
    batch: &[BatchItem<T>],
    cfg: &TrainConfig,
) -> Result<T> {
    let g = batch_gradients(state, data, batch, cfg)?;
    let loss = g.loss;
    apply_gradients(state, g, cfg)?;
    Ok(loss)
}

/// Per-epoch record handed to the evaluation hook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochInfo {
    pub epoch: usize,
    pub mean_loss: f64,
    pub step: u64,
}

pub type EvalHook<'a, T> = dyn FnMut(&EpochInfo, &ModelState<T>) -> Result<()> + 'a;

/// Runs `cfg.epochs` shuffled passes over the pooled training pairs.
pub fn fit<T: Scalar>(
    state: &mut ModelState<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    hook: Option<&mut EvalHook<'_, T>>,
) -> Result<Vec<EpochInfo>> {
    cfg.validate()?;
    state.model.weights.check(&state.model.backbone.config)?;
    for s in &data.subjects {
        state.registry.subject(&s.subject_id)?;
    }
    let mut hook = hook;
    let mut rng = crate::backbone::component_rng(cfg.seed, TAG_SAMPLER, state.step);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(data, cfg.batch_images, &mut rng);
        if batches.is_empty() {
            break;
        }
        let mut total = 0.0;
        for pairs in &batches {
            let items: Vec<BatchItem<T>> =
                pairs.iter().map(|&p| make_item(data, p, cfg.voxels_per_image, &mut rng)).collect();
            total += train_step(state, data, &items, cfg)?.to_f64_lossy();
        }
        let info = EpochInfo { epoch: epoch + 1, mean_loss: total / batches.len() as f64, step: state.step };
        log::info!("epoch {} loss {:.6}", info.epoch, info.mean_loss);
        if let Some(h) = hook.as_deref_mut() {
            if cfg.eval_every > 0 && info.epoch % cfg.eval_every == 0 {
                h(&info, state)?;
            }
        }
        log.push(info);
    }
    Ok(log)
}

/// Trains from scratch on every subject in `data`. The returned state holds
/// 32-bit-representable values, so saving it loses nothing.
pub fn train<T: Scalar>(
    bb: BackboneConfig,
    enc: EncoderConfig,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    hook: Option<&mut EvalHook<'_, T>>,
) -> Result<(ModelState<T>, Vec<EpochInfo>)> {
    cfg.validate()?;
    let mut state = ModelState::init(bb, enc, data, cfg.seed)?;
    state.round_f32();
    let log = fit(&mut state, data, cfg, hook)?;
    state.round_f32();
    Ok((state, log))
}

/// Registers the subjects of `data` on a copy of `state` and optimizes only
/// their embedding tables. Everything else is left bit-identical.
pub fn transfer_learn<T: Scalar>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
) -> Result<ModelState<T>> {
    let mut st = state.clone();
    let ids = st.register_all(data, cfg.seed)?;
    let cfg = TrainConfig { trainable: Trainable::Subjects(ids.clone()), ..cfg.clone() };
    for id in &ids {
        let s = st.registry.subject_mut(id)?;
        s.embeddings = s.embeddings.round_f32();
    }
    fit(&mut st, data, &cfg, None)?;
    for id in &ids {
        let s = st.registry.subject_mut(id)?;
        s.embeddings = s.embeddings.round_f32();
    }
    Ok(st)
}

//! The voxel-image cross-attention block.
//!
//! For a voxel embedding `e` and features `F` (`L × P × C`):
//!
//! * spatial attention: `q = e·W_q`; per level `K_ℓ = F_ℓ·W_k[ℓ] + pos`,
//!   output row `ℓ` is `softmax(q·K_ℓᵀ)·F_ℓ`;
//! * a separate two-layer GELU MLP per level, `C → H → C`;
//! * functional attention: `Σ_i (e·K_func[i]) · v_i` over the flattened MLP
//!   output `v` (no softmax; the query is the raw embedding).
//!
//! Attention logits are not scaled by `1/√E`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{project_levels, Backbone, BackboneConfig, FeatureTensor, Image, LowRankAdapter};
use crate::error::{ensure, Result};
use crate::registry::{Registry, VoxelKey};
use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Embedding size, E.
    pub embedding_dim: usize,
    /// Hidden width of the per-level MLPs; 0 means "same as channels".
    pub mlp_hidden: usize,
    /// One key projection for all levels instead of one per level.
    pub share_key_projection: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { embedding_dim: 256, mlp_hidden: 0, share_key_projection: false }
    }
}

impl EncoderConfig {
    pub fn hidden(&self, channels: usize) -> usize {
        if self.mlp_hidden == 0 {
            channels
        } else {
            self.mlp_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.embedding_dim >= 1, Config, "embedding_dim must be >= 1");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> Mlp<T> {
    /// `x (n×C) → gelu(x·W1 + b1)·W2 + b2`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w1)?.add_row(&self.b1)?.gelu().matmul(&self.w2)?.add_row(&self.b2)
    }
}

/// Every parameter shared across voxels and subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedWeights<T> {
    /// `E × E`
    pub query: Tensor<T>,
    /// `C × E`, one per level (or a single shared one).
    pub keys: Vec<Tensor<T>>,
    /// `P × E`
    pub pos_emb: Tensor<T>,
    pub mlps: Vec<Mlp<T>>,
    /// `(L·C) × E`
    pub func_emb: Tensor<T>,
    /// `C_raw × C`, one per level.
    pub level_proj: Vec<Tensor<T>>,
    /// Output-projection adapters, one per level; empty when disabled.
    pub adapters: Vec<LowRankAdapter<T>>,
}

fn normal_matrix<T: Scalar>(rows: usize, cols: usize, sd: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = Normal::new(0.0, sd).unwrap();
    Tensor::from_fn(rows, cols, |_, _| T::lit(n.sample(rng)))
}

impl<T: Scalar> SharedWeights<T> {
    pub fn init(bb: &BackboneConfig, enc: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (l, p, c, cr, e) = (bb.levels, bb.patches, bb.channels, bb.raw_channels, enc.embedding_dim);
        let h = enc.hidden(c);
        let fe = |n: usize| 1.0 / (n as f64).sqrt();
        let query = normal_matrix(e, e, fe(e), rng);
        let n_keys = if enc.share_key_projection { 1 } else { l };
        let keys = (0..n_keys).map(|_| normal_matrix(c, e, fe(c), rng)).collect();
        let pos_emb = normal_matrix(p, e, fe(e), rng);
        let mlps = (0..l)
            .map(|_| Mlp {
                w1: normal_matrix(c, h, fe(c), rng),
                b1: Tensor::zeros(&[1, h]),
                w2: normal_matrix(h, c, fe(h), rng),
                b2: Tensor::zeros(&[1, c]),
            })
            .collect();
        let func_emb = normal_matrix(l * c, e, fe(e), rng);
        let level_proj = (0..l).map(|_| normal_matrix(cr, c, fe(cr), rng)).collect();
        let adapters = if bb.adapter_rank == 0 {
            Vec::new()
        } else {
            (0..l)
                .map(|level| LowRankAdapter {
                    a: normal_matrix(cr, bb.adapter_rank, fe(cr), rng),
                    b: Tensor::zeros(&[bb.adapter_rank, cr]),
                    level,
                })
                .collect()
        };
        SharedWeights { query, keys, pos_emb, mlps, func_emb, level_proj, adapters }
    }

    pub fn key(&self, level: usize) -> &Tensor<T> {
        if self.keys.len() == 1 {
            &self.keys[0]
        } else {
            &self.keys[level]
        }
    }

    pub fn levels(&self) -> usize {
        self.mlps.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.query.rows()
    }

    pub fn channels(&self) -> usize {
        self.mlps[0].w1.rows()
    }

    /// All tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("query".to_string(), &self.query)];
        for (i, k) in self.keys.iter().enumerate() {
            out.push((format!("keys/{i}"), k));
        }
        out.push(("pos_emb".into(), &self.pos_emb));
        for (i, m) in self.mlps.iter().enumerate() {
            out.push((format!("mlp/{i}/w1"), &m.w1));
            out.push((format!("mlp/{i}/b1"), &m.b1));
            out.push((format!("mlp/{i}/w2"), &m.w2));
            out.push((format!("mlp/{i}/b2"), &m.b2));
        }
        out.push(("func_emb".into(), &self.func_emb));
        for (i, w) in self.level_proj.iter().enumerate() {
            out.push((format!("level_proj/{i}"), w));
        }
        for (i, a) in self.adapters.iter().enumerate() {
            out.push((format!("adapter/{i}/a"), &a.a));
            out.push((format!("adapter/{i}/b"), &a.b));
        }
        out
    }

    /// Same order and names as [`SharedWeights::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("query".to_string(), &mut self.query)];
        for (i, k) in self.keys.iter_mut().enumerate() {
            out.push((format!("keys/{i}"), k));
        }
        out.push(("pos_emb".into(), &mut self.pos_emb));
        for (i, m) in self.mlps.iter_mut().enumerate() {
            out.push((format!("mlp/{i}/w1"), &mut m.w1));
            out.push((format!("mlp/{i}/b1"), &mut m.b1));
            out.push((format!("mlp/{i}/w2"), &mut m.w2));
            out.push((format!("mlp/{i}/b2"), &mut m.b2));
        }
        out.push(("func_emb".into(), &mut self.func_emb));
        for (i, w) in self.level_proj.iter_mut().enumerate() {
            out.push((format!("level_proj/{i}"), w));
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            out.push((format!("adapter/{i}/a"), &mut a.a));
            out.push((format!("adapter/{i}/b"), &mut a.b));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            *t = Tensor::zeros(t.shape());
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn round_f32(&mut self) {
        for (_, t) in self.named_mut() {
            *t = t.round_f32();
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for (_, t) in self.named_mut() {
            for x in t.data_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn check(&self, bb: &BackboneConfig) -> Result<()> {
        let (l, p, c, cr) = (bb.levels, bb.patches, bb.channels, bb.raw_channels);
        let e = self.embedding_dim();
        ensure!(self.query.shape() == [e, e], Dimension, "query must be {e}x{e}");
        ensure!(self.keys.len() == 1 || self.keys.len() == l, Dimension, "key count {}", self.keys.len());
        ensure!(self.keys.iter().all(|k| k.shape() == [c, e]), Dimension, "keys must be {c}x{e}");
        ensure!(self.pos_emb.shape() == [p, e], Dimension, "pos_emb must be {p}x{e}");
        ensure!(self.mlps.len() == l, Dimension, "{} MLPs for {} levels", self.mlps.len(), l);
        ensure!(self.func_emb.shape() == [l * c, e], Dimension, "func_emb must be {}x{e}", l * c);
        ensure!(
            self.level_proj.len() == l && self.level_proj.iter().all(|w| w.shape() == [cr, c]),
            Dimension,
            "level projections must be {l} of {cr}x{c}"
        );
        ensure!(
            self.adapters.is_empty() || self.adapters.len() == l,
            Dimension,
            "adapter count {}",
            self.adapters.len()
        );
        Ok(())
    }
}

/// Predicted activation of one voxel, in z-units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub key: VoxelKey,
    pub value: T,
}

fn check_embedding<T: Scalar>(embedding: &[T], weights: &SharedWeights<T>) -> Result<()> {
    ensure!(
        embedding.len() == weights.embedding_dim(),
        Dimension,
        "embedding of length {} for E = {}",
        embedding.len(),
        weights.embedding_dim()
    );
    Ok(())
}

fn check_features<T: Scalar>(features: &FeatureTensor<T>, weights: &SharedWeights<T>) -> Result<()> {
    ensure!(
        features.levels == weights.levels()
            && features.channels == weights.channels()
            && features.patches == weights.pos_emb.rows(),
        Dimension,
        "features {}x{}x{} do not match weights",
        features.levels,
        features.patches,
        features.channels
    );
    Ok(())
}

/// `F_ℓ·W_k[ℓ] + pos` for every level.
pub fn key_matrices<T: Scalar>(features: &FeatureTensor<T>, weights: &SharedWeights<T>) -> Result<Vec<Tensor<T>>> {
    check_features(features, weights)?;
    (0..features.levels)
        .map(|l| features.level(l).matmul(weights.key(l))?.add(&weights.pos_emb))
        .collect()
}

/// Per-level attention distributions over patches, `L × P`.
pub fn spatial_attention_weights<T: Scalar>(
    embedding: &[T],
    key_features: &FeatureTensor<T>,
    weights: &SharedWeights<T>,
) -> Result<Tensor<T>> {
    check_embedding(embedding, weights)?;
    let e = embedding.len();
    let q = Tensor::matrix(1, e, embedding.to_vec())?.matmul(&weights.query)?;
    let keys = key_matrices(key_features, weights)?;
    let rows: Vec<Vec<T>> = keys
        .iter()
        .map(|k| Ok(q.matmul_nt(k)?.softmax_rows()?.into_data()))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Spatial attention with keys computed from `key_features` and values taken
/// from `value_features`.
pub fn spatial_attention_split<T: Scalar>(
    embedding: &[T],
    key_features: &FeatureTensor<T>,
    value_features: &FeatureTensor<T>,
    weights: &SharedWeights<T>,
) -> Result<Tensor<T>> {
    check_features(value_features, weights)?;
    let attn = spatial_attention_weights(embedding, key_features, weights)?;
    let rows: Vec<Vec<T>> = (0..value_features.levels)
        .map(|l| {
            let a = Tensor::matrix(1, attn.cols(), attn.row(l).to_vec())?;
            Ok(a.matmul(&value_features.level(l))?.into_data())
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Attention-pooled features, `L × C`.
pub fn spatial_attention<T: Scalar>(
    embedding: &[T],
    features: &FeatureTensor<T>,
    weights: &SharedWeights<T>,
) -> Result<Tensor<T>> {
    spatial_attention_split(embedding, features, features, weights)
}

/// Row `ℓ` goes through MLP `ℓ` only.
pub fn mlp_forward<T: Scalar>(spatial_out: &Tensor<T>, weights: &SharedWeights<T>) -> Result<Tensor<T>> {
    ensure!(
        spatial_out.rows() == weights.levels(),
        Dimension,
        "{} rows for {} levels",
        spatial_out.rows(),
        weights.levels()
    );
    let rows: Vec<Vec<T>> = weights
        .mlps
        .iter()
        .enumerate()
        .map(|(l, mlp)| {
            let x = Tensor::matrix(1, spatial_out.cols(), spatial_out.row(l).to_vec())?;
            Ok(mlp.forward(&x)?.into_data())
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// `Σ_i (embedding·K_func[i]) · flatten(mlp_out)_i`.
pub fn functional_attention<T: Scalar>(
    embedding: &[T],
    mlp_out: &Tensor<T>,
    weights: &SharedWeights<T>,
) -> Result<T> {
    check_embedding(embedding, weights)?;
    let v = mlp_out.data();
    ensure!(
        v.len() == weights.func_emb.rows(),
        Dimension,
        "{} features for a functional embedding of {} rows",
        v.len(),
        weights.func_emb.rows()
    );
    Ok(v
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &vi)| acc + dot(embedding, weights.func_emb.row(i)) * vi))
}

/// Scalar prediction for one embedding.
pub fn predict_embedding<T: Scalar>(
    embedding: &[T],
    features: &FeatureTensor<T>,
    weights: &SharedWeights<T>,
) -> Result<T> {
    let s = spatial_attention(embedding, features, weights)?;
    let m = mlp_forward(&s, weights)?;
    functional_attention(embedding, &m, weights)
}

pub fn predict_voxel<T: Scalar>(
    features: &FeatureTensor<T>,
    key: &VoxelKey,
    registry: &Registry<T>,
    weights: &SharedWeights<T>,
) -> Result<Prediction<T>> {
    let e = registry.get_embedding(key)?;
    Ok(Prediction { key: key.clone(), value: predict_embedding(e, features, weights)? })
}

/// Predictions for a batch of embeddings (`n × E`) sharing one image.
pub fn predict_batch<T: Scalar>(
    features: &FeatureTensor<T>,
    embeddings: &Tensor<T>,
    weights: &SharedWeights<T>,
) -> Result<Vec<T>> {
    check_features(features, weights)?;
    ensure!(
        embeddings.cols() == weights.embedding_dim(),
        Dimension,
        "embeddings have {} columns for E = {}",
        embeddings.cols(),
        weights.embedding_dim()
    );
    let keys = key_matrices(features, weights)?;
    let q = embeddings.matmul(&weights.query)?;
    let mut parts = Vec::with_capacity(features.levels);
    for (l, k) in keys.iter().enumerate() {
        let attn = q.matmul_nt(k)?.softmax_rows()?;
        let pooled = attn.matmul(&features.level(l))?;
        parts.push(weights.mlps[l].forward(&pooled)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let v = Tensor::concat_cols(&refs)?;
    let g = embeddings.matmul_nt(&weights.func_emb)?;
    Ok((0..embeddings.rows()).map(|i| dot(g.row(i), v.row(i))).collect())
}

/// Predictions for every voxel of a subject, in voxel order.
pub fn predict_fmri<T: Scalar>(
    features: &FeatureTensor<T>,
    subject_id: &str,
    registry: &Registry<T>,
    weights: &SharedWeights<T>,
) -> Result<Vec<T>> {
    let s = registry.subject(subject_id)?;
    predict_batch(features, &s.embeddings, weights)
}

/// Backbone plus shared weights: everything needed to turn a stimulus into
/// encoder-ready features.
#[derive(Debug, Clone)]
pub struct EncoderModel<T> {
    pub backbone: Backbone<T>,
    pub encoder: EncoderConfig,
    pub weights: SharedWeights<T>,
}

impl<T: Scalar> EncoderModel<T> {
    pub fn new(bb: BackboneConfig, encoder: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        encoder.validate()?;
        let backbone = Backbone::new(bb)?;
        let weights = SharedWeights::init(&backbone.config, &encoder, rng);
        Ok(EncoderModel { backbone, encoder, weights })
    }

    pub fn from_parts(bb: BackboneConfig, encoder: EncoderConfig, weights: SharedWeights<T>) -> Result<Self> {
        let backbone = Backbone::new(bb)?;
        weights.check(&backbone.config)?;
        Ok(EncoderModel { backbone, encoder, weights })
    }

    fn adapters(&self) -> Option<&[LowRankAdapter<T>]> {
        if self.weights.adapters.is_empty() {
            None
        } else {
            Some(&self.weights.adapters)
        }
    }

    /// Encoder-ready features from frozen backbone output (`L × P × C_raw`).
    pub fn features(&self, raw: &FeatureTensor<T>) -> Result<FeatureTensor<T>> {
        let out = self.backbone.output_features(raw, self.adapters())?;
        project_levels(&out, &self.weights.level_proj)
    }

    pub fn features_from_image(&self, image: &Image) -> Result<FeatureTensor<T>> {
        self.backbone.extract_features(image, self.adapters(), &self.weights.level_proj)
    }

    pub fn predict_fmri(&self, raw: &FeatureTensor<T>, subject_id: &str, registry: &Registry<T>) -> Result<Vec<T>> {
        predict_fmri(&self.features(raw)?, subject_id, registry, &self.weights)
    }
}

/// Tape handles for every shared tensor, mirroring [`SharedWeights`].
#[derive(Debug, Clone)]
pub struct WeightVars {
    query: Var,
    keys: Vec<Var>,
    pos_emb: Var,
    mlps: Vec<[Var; 4]>,
    func_emb: Var,
    level_proj: Vec<Var>,
    adapters: Vec<(Var, Var)>,
}

/// Which parameter groups the recorded graph differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientMask {
    pub shared: bool,
    pub level_projections: bool,
    pub embeddings: bool,
}

impl GradientMask {
    pub const ALL: GradientMask = GradientMask { shared: true, level_projections: true, embeddings: true };
}

/// Result of recording one image's forward pass.
pub struct Recorded {
    pub predictions: Var,
    pub embeddings: Var,
    pub weights: WeightVars,
}

/// Records the forward pass for `embeddings` (`n × E`) on one stimulus given
/// as frozen backbone output.
pub fn record_forward<T: Scalar>(
    tape: &mut Tape<T>,
    backbone: &Backbone<T>,
    raw: &FeatureTensor<T>,
    embeddings: Tensor<T>,
    weights: &SharedWeights<T>,
    mask: GradientMask,
) -> Result<Recorded> {
    backbone.check_raw(raw)?;
    let leaf = |tape: &mut Tape<T>, t: &Tensor<T>, grad: bool| {
        if grad {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let sh = mask.shared;
    let wv = WeightVars {
        query: leaf(tape, &weights.query, sh),
        keys: weights.keys.iter().map(|k| leaf(tape, k, sh)).collect(),
        pos_emb: leaf(tape, &weights.pos_emb, sh),
        mlps: weights
            .mlps
            .iter()
            .map(|m| [leaf(tape, &m.w1, sh), leaf(tape, &m.b1, sh), leaf(tape, &m.w2, sh), leaf(tape, &m.b2, sh)])
            .collect(),
        func_emb: leaf(tape, &weights.func_emb, sh),
        level_proj: weights
            .level_proj
            .iter()
            .map(|w| leaf(tape, w, sh && mask.level_projections))
            .collect(),
        adapters: weights
            .adapters
            .iter()
            .map(|a| (leaf(tape, &a.a, sh), leaf(tape, &a.b, sh)))
            .collect(),
    };
    let emb = leaf(tape, &embeddings, mask.embeddings);

    let levels = raw.levels;
    let mut feats = Vec::with_capacity(levels);
    for l in 0..levels {
        let r = tape.constant(raw.level(l));
        let wo = tape.constant(backbone.output_projection(l).clone());
        let w_eff = match wv.adapters.get(l) {
            Some(&(a, b)) => {
                let ab = tape.matmul(a, b)?;
                tape.add(wo, ab)?
            }
            None => wo,
        };
        let h = tape.matmul(r, w_eff)?;
        feats.push(tape.matmul(h, wv.level_proj[l])?);
    }

    let q = tape.matmul(emb, wv.query)?;
    let mut outs = Vec::with_capacity(levels);
    for (l, &f) in feats.iter().enumerate() {
        let wk = if wv.keys.len() == 1 { wv.keys[0] } else { wv.keys[l] };
        let fk = tape.matmul(f, wk)?;
        let k = tape.add(fk, wv.pos_emb)?;
        let logits = tape.matmul_nt(q, k)?;
        let attn = tape.softmax_rows(logits)?;
        let pooled = tape.matmul(attn, f)?;
        let [w1, b1, w2, b2] = wv.mlps[l];
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        outs.push(tape.add_row(o, b2)?);
    }
    let v = tape.concat_cols(&outs)?;
    let g = tape.matmul_nt(emb, wv.func_emb)?;
    let gv = tape.mul(g, v)?;
    let predictions = tape.row_sum(gv);
    Ok(Recorded { predictions, embeddings: emb, weights: wv })
}

/// Collects shared-weight gradients into a [`SharedWeights`]-shaped value;
/// tensors the tape did not differentiate come back as zeros.
pub fn collect_weight_grads<T: Scalar>(
    grads: &mut crate::autodiff::Gradients<T>,
    vars: &WeightVars,
    like: &SharedWeights<T>,
) -> SharedWeights<T> {
    let mut out = like.zeros_like();
    let mut take = |v: Var, dst: &mut Tensor<T>| {
        if let Some(g) = grads.take(v) {
            *dst = g;
        }
    };
    take(vars.query, &mut out.query);
    for (v, t) in vars.keys.iter().zip(out.keys.iter_mut()) {
        take(*v, t);
    }
    take(vars.pos_emb, &mut out.pos_emb);
    for (vs, m) in vars.mlps.iter().zip(out.mlps.iter_mut()) {
        take(vs[0], &mut m.w1);
        take(vs[1], &mut m.b1);
        take(vs[2], &mut m.w2);
        take(vs[3], &mut m.b2);
    }
    take(vars.func_emb, &mut out.func_emb);
    for (v, t) in vars.level_proj.iter().zip(out.level_proj.iter_mut()) {
        take(*v, t);
    }
    for ((va, vb), a) in vars.adapters.iter().zip(out.adapters.iter_mut()) {
        take(*va, &mut a.a);
        take(*vb, &mut a.b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(l: usize, p: usize, c: usize) -> BackboneConfig {
        BackboneConfig { levels: l, patches: p, channels: c, raw_channels: 6, adapter_rank: 2, patch_pixels: 4, seed: 3 }
    }

    fn weights(l: usize, p: usize, c: usize, e: usize, seed: u64) -> SharedWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderConfig { embedding_dim: e, ..Default::default() };
        let mut w = SharedWeights::init(&config(l, p, c), &enc, &mut rng);
        for m in &mut w.mlps {
            m.b1 = normal_matrix(1, m.b1.cols(), 0.5, &mut rng);
            m.b2 = normal_matrix(1, m.b2.cols(), 0.5, &mut rng);
        }
        w
    }

    fn features(l: usize, p: usize, c: usize, seed: u64) -> FeatureTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        FeatureTensor::new(l, p, c, (0..l * p * c).map(|_| n.sample(&mut rng)).collect()).unwrap()
    }

    fn embedding(e: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..e).map(|_| n.sample(&mut rng)).collect()
    }

    /// Direct-formula oracle for spatial attention, written with explicit loops.
    fn spatial_oracle(emb: &[f64], f: &FeatureTensor<f64>, w: &SharedWeights<f64>) -> Vec<Vec<f64>> {
        let e = emb.len();
        let q: Vec<f64> = (0..e).map(|j| (0..e).map(|i| emb[i] * w.query.get(i, j)).sum()).collect();
        (0..f.levels)
            .map(|l| {
                let logits: Vec<f64> = (0..f.patches)
                    .map(|p| {
                        (0..e)
                            .map(|j| {
                                let k = (0..f.channels).map(|c| f.get(l, p, c) * w.key(l).get(c, j)).sum::<f64>()
                                    + w.pos_emb.get(p, j);
                                q[j] * k
                            })
                            .sum()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                (0..f.channels)
                    .map(|c| (0..f.patches).map(|p| (logits[p] - m).exp() / z * f.get(l, p, c)).sum())
                    .collect()
            })
            .collect()
    }

    fn mlp_oracle(x: &[f64], m: &Mlp<f64>) -> Vec<f64> {
        let h: Vec<f64> = (0..m.w1.cols())
            .map(|j| gelu((0..x.len()).map(|i| x[i] * m.w1.get(i, j)).sum::<f64>() + m.b1.data()[j]))
            .collect();
        (0..m.w2.cols())
            .map(|j| (0..h.len()).map(|i| h[i] * m.w2.get(i, j)).sum::<f64>() + m.b2.data()[j])
            .collect()
    }

    fn functional_oracle(emb: &[f64], v: &[f64], w: &SharedWeights<f64>) -> f64 {
        let mut total = 0.0;
        for (i, &vi) in v.iter().enumerate() {
            let mut s = 0.0;
            for (j, &ej) in emb.iter().enumerate() {
                s += ej * w.func_emb.get(i, j);
            }
            total += s * vi;
        }
        total
    }

    #[test]
    fn single_patch_returns_its_features() {
        let w = weights(2, 1, 3, 4, 1);
        let f = features(2, 1, 3, 2);
        let s = spatial_attention(&embedding(4, 3), &f, &w).unwrap();
        for l in 0..2 {
            assert_eq!(s.row(l), f.level_slice(l));
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut w = weights(1, 4, 2, 3, 1);
        w.pos_emb = Tensor::zeros(&[4, 3]);
        w.keys[0] = Tensor::zeros(&[2, 3]);
        let f = features(1, 4, 2, 5);
        let s = spatial_attention(&embedding(3, 4), &f, &w).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|p| f.get(0, p, c)).sum::<f64>() / 4.0;
            assert!((s.get(0, c) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_attention_matches_oracle() {
        for seed in 0..20 {
            let w = weights(2, 3, 4, 5, seed);
            let f = features(2, 3, 4, seed + 100);
            let emb = embedding(5, seed + 200);
            let got = spatial_attention(&emb, &f, &w).unwrap();
            let want = spatial_oracle(&emb, &f, &w);
            for l in 0..2 {
                for c in 0..4 {
                    assert!((got.get(l, c) - want[l][c]).abs() < 1e-12);
                }
            }
            let attn = spatial_attention_weights(&emb, &f, &w).unwrap();
            for l in 0..2 {
                let row = attn.row(l);
                assert!(row.iter().all(|&a| a >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn value_path_is_linear() {
        let w = weights(2, 4, 3, 5, 9);
        let fk = features(2, 4, 3, 10);
        let fv = features(2, 4, 3, 11);
        let emb = embedding(5, 12);
        let base = spatial_attention_split(&emb, &fk, &fv, &w).unwrap();
        let mut scaled = fv.clone();
        scaled.data.iter_mut().for_each(|x| *x *= -2.5);
        let out = spatial_attention_split(&emb, &fk, &scaled, &w).unwrap();
        for (a, b) in out.data().iter().zip(base.data()) {
            assert!((a - (-2.5) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_cases() {
        let mut w = weights(3, 2, 4, 3, 1);
        let x = Tensor::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let out = mlp_forward(&x, &w).unwrap();
        for l in 0..3 {
            let want = mlp_oracle(x.row(l), &w.mlps[l]);
            for (a, b) in out.row(l).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut x2 = x.clone();
        x2.row_mut(0).iter_mut().for_each(|v| *v += 1.0);
        let out2 = mlp_forward(&x2, &w).unwrap();
        assert_ne!(out2.row(0), out.row(0));
        assert_eq!(out2.row(1), out.row(1));
        assert_eq!(out2.row(2), out.row(2));

        let mut zero = w.zeros_like();
        std::mem::swap(&mut zero, &mut w);
        assert!(mlp_forward(&x, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn functional_attention_cases() {
        let mut w = weights(2, 2, 4, 4, 3);
        let emb = embedding(4, 1);
        let v = Tensor::from_fn(2, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.3);
        assert!((functional_attention(&emb, &v, &w).unwrap() - functional_oracle(&emb, v.data(), &w)).abs() < 1e-12);
        assert_eq!(functional_attention(&emb, &Tensor::zeros(&[2, 4]), &w).unwrap(), 0.0);
        // every key row u with emb·u = 1
        let nn: f64 = emb.iter().map(|x| x * x).sum();
        let u: Vec<f64> = emb.iter().map(|x| x / nn).collect();
        w.func_emb = Tensor::from_fn(8, 4, |_, j| u[j]);
        let out = functional_attention(&emb, &v, &w).unwrap();
        assert!((out - v.sum()).abs() < 1e-12);
    }

    #[test]
    fn functional_attention_random_oracle() {
        for seed in 0..20 {
            let w = weights(2, 2, 4, 4, seed);
            let emb = embedding(4, seed + 7);
            let v = features(1, 2, 4, seed + 9).level(0);
            let got = functional_attention(&emb, &v, &w).unwrap();
            assert!((got - functional_oracle(&emb, v.data(), &w)).abs() < 1e-12);
        }
    }

    fn registry_with(embs: &[Vec<f64>]) -> Registry<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reg = Registry::new(embs[0].len());
        reg.register_subject("s", "d", embs.len(), &mut rng).unwrap();
        for (i, e) in embs.iter().enumerate() {
            reg.embedding_mut(&VoxelKey::new("s", i)).unwrap().copy_from_slice(e);
        }
        reg
    }

    #[test]
    fn predict_voxel_cases() {
        let w = weights(3, 4, 3, 5, 2);
        let f = features(3, 4, 3, 4);
        let e1 = embedding(5, 6);
        let reg = registry_with(&[vec![0.0; 5], e1.clone(), e1.clone()]);
        assert_eq!(predict_voxel(&f, &VoxelKey::new("s", 0), &reg, &w).unwrap().value, 0.0);
        let a = predict_voxel(&f, &VoxelKey::new("s", 1), &reg, &w).unwrap().value;
        let b = predict_voxel(&f, &VoxelKey::new("s", 2), &reg, &w).unwrap().value;
        assert_eq!(a, b);
        let s = spatial_oracle(&e1, &f, &w);
        let m: Vec<f64> = (0..3).flat_map(|l| mlp_oracle(&s[l], &w.mlps[l])).collect();
        assert!((a - functional_oracle(&e1, &m, &w)).abs() < 1e-12);
        assert!(predict_voxel(&f, &VoxelKey::new("s", 3), &reg, &w).is_err());
    }

    #[test]
    fn predict_fmri_matches_loop_and_permutes() {
        let w = weights(3, 4, 3, 5, 2);
        let f = features(3, 4, 3, 4);
        let embs: Vec<Vec<f64>> = (0..6).map(|i| embedding(5, 30 + i)).collect();
        let reg = registry_with(&embs);
        let batch = predict_fmri(&f, "s", &reg, &w).unwrap();
        for (i, &b) in batch.iter().enumerate() {
            let single = predict_voxel(&f, &VoxelKey::new("s", i), &reg, &w).unwrap().value;
            assert!((b - single).abs() < 1e-12);
        }
        let mut swapped = embs.clone();
        swapped.swap(1, 4);
        let out = predict_fmri(&f, "s", &registry_with(&swapped), &w).unwrap();
        assert!((out[1] - batch[4]).abs() < 1e-12 && (out[4] - batch[1]).abs() < 1e-12);

        let one = registry_with(&embs[..1]);
        let single = predict_fmri(&f, "s", &one, &w).unwrap();
        assert_eq!(single.len(), 1);
        assert!((single[0] - predict_voxel(&f, &VoxelKey::new("s", 0), &one, &w).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        let bb = config(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = EncoderConfig { embedding_dim: 5, ..Default::default() };
        let mut model = EncoderModel::<f64>::new(bb, enc, &mut rng).unwrap();
        for a in &mut model.weights.adapters {
            a.b = normal_matrix(a.b.rows(), a.b.cols(), 0.3, &mut rng);
        }
        let img = Image::gray(8, 8, (0..64).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let raw = model.backbone.raw_features(&img).unwrap();
        let embs = normal_matrix::<f64>(4, 5, 1.0, &mut rng);
        let direct = predict_batch(&model.features(&raw).unwrap(), &embs, &model.weights).unwrap();
        let mut tape = Tape::new();
        let rec = record_forward(&mut tape, &model.backbone, &raw, embs, &model.weights, GradientMask::ALL).unwrap();
        for (a, b) in tape.value(rec.predictions).data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let direct_img = model.features_from_image(&img).unwrap();
        assert_eq!(direct_img, model.features(&raw).unwrap());
    }
}

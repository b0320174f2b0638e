//! Evaluation: per-voxel correlation, noise-ceiling-normalized accuracy,
//! retrieval, RSA and embedding clustering.

pub mod cluster;
pub mod metrics;
pub mod retrieval;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::train::data::TrainingData;
use crate::train::engine::ModelState;

pub use cluster::{adjusted_rand_index, cluster_top_images, embedding_rsa_alignment, kmeans, ClusterReport, KMeans, VoxelGroup};
pub use metrics::{encoding_accuracy, mse, noise_ceiling, pearson, percentile, rsa_compare, rsm, voxelwise_correlation};
pub use retrieval::{retrieval_test, RetrievalResult};

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Predictions for `stimuli` (pool indices), `S × V`.
pub fn predict_stimuli<T: Scalar>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    subject_id: &str,
    stimuli: &[usize],
) -> Result<Vec<Vec<f64>>> {
    stimuli
        .par_iter()
        .map(|&s| state.predict(data, s, subject_id).map(|p| to_f64(&p)))
        .collect()
}

/// Predicted and repeat-averaged measured responses on the subject's test set.
pub fn test_responses<T: Scalar>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    subject_id: &str,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = data.subject(subject_id)?;
    let pred = predict_stimuli(state, data, subject_id, &s.test)?;
    let meas = s.test_targets.iter().map(|r| to_f64(r)).collect();
    Ok((pred, meas))
}

/// Median held-out per-voxel Pearson for one subject.
pub fn median_test_correlation<T: Scalar>(state: &ModelState<T>, data: &TrainingData<T>, subject_id: &str) -> Result<f64> {
    let (p, m) = test_responses(state, data, subject_id)?;
    Ok(voxelwise_correlation(&p, &m)?.median())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Candidate set size for retrieval; 0 skips retrieval.
    pub retrieval_n: usize,
    pub retrieval_resamples: usize,
    pub seed: u64,
    pub rsa: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { retrieval_n: 100, retrieval_resamples: retrieval::DEFAULT_RESAMPLES, seed: 0, rsa: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject_id: String,
    pub checkpoint_hash: Option<String>,
    pub config_hash: Option<String>,
    pub seed: u64,
    pub test_stimuli: usize,
    pub voxels: usize,
    pub correlations: Vec<Option<f64>>,
    pub degenerate_voxels: usize,
    pub median_r: f64,
    pub p25_r: f64,
    pub p75_r: f64,
    pub mse: f64,
    pub noise_ceiling: Option<Vec<f64>>,
    pub encoding_accuracy: Option<Vec<f64>>,
    pub mean_encoding_accuracy: Option<f64>,
    pub accuracy_clamped: usize,
    pub retrieval: Option<RetrievalResult>,
    pub rsa: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per voxel: `voxel,r,noise_ceiling,encoding_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject_id,voxel,r,noise_ceiling,encoding_accuracy\n");
        let fmt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        for (v, r) in self.correlations.iter().enumerate() {
            let c = self.noise_ceiling.as_ref().map(|c| c[v]);
            let a = self.encoding_accuracy.as_ref().map(|a| a[v]);
            let _ = writeln!(out, "{},{},{},{},{}", self.subject_id, v, fmt(*r), fmt(c), fmt(a));
        }
        out
    }

    pub const SUMMARY_HEADER: &'static str =
        "subject_id,voxels,degenerate,median_r,p25_r,p75_r,mse,mean_encoding_accuracy,top1,top5,rsa";

    pub fn summary_row(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.subject_id,
            self.voxels,
            self.degenerate_voxels,
            self.median_r,
            self.p25_r,
            self.p75_r,
            self.mse,
            o(self.mean_encoding_accuracy),
            o(self.retrieval.map(|r| r.top1)),
            o(self.retrieval.map(|r| r.top5)),
            o(self.rsa)
        )
    }
}

/// All per-subject metrics on the held-out test set.
pub fn evaluate_subject<T: Scalar>(
    state: &ModelState<T>,
    data: &TrainingData<T>,
    subject_id: &str,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let subject = data.subject(subject_id)?;
    let (pred, meas) = test_responses(state, data, subject_id)?;
    let corr = voxelwise_correlation(&pred, &meas)?;
    let valid = corr.valid();
    let repeats: Vec<Vec<Vec<f64>>> =
        subject.test_repeats.iter().map(|reps| reps.iter().map(|r| to_f64(r)).collect()).collect();
    let has_repeats = repeats.len() >= 2 && repeats.iter().all(|r| r.len() >= 2);
    let (ceiling, accuracy, mean_acc, clamped) = if has_repeats {
        let c = noise_ceiling(&repeats, opts.seed)?;
        let r: Vec<f64> = corr.r.iter().map(|x| x.unwrap_or(0.0)).collect();
        let (a, clamped) = encoding_accuracy(&r, &c)?;
        let kept: Vec<f64> = corr.r.iter().zip(&a).filter(|(r, _)| r.is_some()).map(|(_, &a)| a).collect();
        let mean = kept.iter().sum::<f64>() / kept.len().max(1) as f64;
        (Some(c), Some(a), Some(mean), clamped)
    } else {
        (None, None, None, 0)
    };
    let retrieval = if opts.retrieval_n >= 2 && meas.len() >= 2 {
        let n = opts.retrieval_n.min(meas.len());
        if n < opts.retrieval_n {
            log::warn!("retrieval N reduced from {} to the {} test stimuli", opts.retrieval_n, n);
        }
        Some(retrieval_test(&meas, &pred, n, opts.retrieval_resamples, opts.seed)?)
    } else {
        None
    };
    let rsa = if opts.rsa && meas.len() >= 3 && subject.voxel_count >= 2 {
        rsa_compare(&rsm(&pred)?, &rsm(&meas)?).ok()
    } else {
        None
    };
    Ok(MetricReport {
        subject_id: subject_id.to_string(),
        checkpoint_hash: None,
        config_hash: None,
        seed: opts.seed,
        test_stimuli: meas.len(),
        voxels: subject.voxel_count,
        degenerate_voxels: corr.degenerate,
        median_r: percentile(&valid, 50.0),
        p25_r: percentile(&valid, 25.0),
        p75_r: percentile(&valid, 75.0),
        mse: mse(&pred, &meas)?,
        correlations: corr.r,
        noise_ceiling: ceiling,
        encoding_accuracy: accuracy,
        mean_encoding_accuracy: mean_acc,
        accuracy_clamped: clamped,
        retrieval,
        rsa,
    })
}

/// Subject embedding tables stacked in the order given, with the owning
/// subject's position for each row.
pub fn pooled_embeddings<T: Scalar>(state: &ModelState<T>, subject_ids: &[&str]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    for (i, id) in subject_ids.iter().enumerate() {
        let s = state.registry.subject(id)?;
        for r in 0..s.voxel_count {
            rows.push(to_f64(s.embeddings.row(r)));
            owner.push(i);
        }
    }
    Ok((rows, owner))
}

/// Test-set responses of several subjects side by side (`S × ΣV`). All
/// subjects must share the same test stimuli.
pub fn pooled_test_targets<T: Scalar>(data: &TrainingData<T>, subject_ids: &[&str]) -> Result<Vec<Vec<f64>>> {
    let first = data.subject(subject_ids[0])?;
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); first.test.len()];
    for id in subject_ids {
        let s = data.subject(id)?;
        crate::error::ensure!(s.test == first.test, Config, "subject {id:?} has a different test set");
        for (row, t) in out.iter_mut().zip(&s.test_targets) {
            row.extend(to_f64(t));
        }
    }
    Ok(out)
}

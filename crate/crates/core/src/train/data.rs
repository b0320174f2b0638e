//! Stimulus pools and per-subject targets assembled from manifests.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{load_features, Backbone, FeatureTensor, Image};
use crate::error::{ensure, Result};
use crate::preprocess::{zscore_per_run, ResponseMatrix};
use crate::registry::DatasetManifest;
use crate::scalar::Scalar;

/// One subject's repeat-averaged targets over pool stimuli.
#[derive(Debug, Clone)]
pub struct SubjectData<T> {
    pub subject_id: String,
    pub dataset_id: String,
    pub voxel_count: usize,
    /// Pool indices of training stimuli.
    pub train: Vec<usize>,
    /// `train.len()` rows of `voxel_count` targets.
    pub train_targets: Vec<Vec<T>>,
    pub test: Vec<usize>,
    pub test_targets: Vec<Vec<T>>,
    /// Per test stimulus, every repeat (`repeats × voxel_count`).
    pub test_repeats: Vec<Vec<Vec<T>>>,
}

/// All stimuli seen by any subject, as frozen backbone output, plus targets.
#[derive(Debug, Clone)]
pub struct TrainingData<T> {
    pub stimulus_ids: Vec<String>,
    pub raw: Vec<FeatureTensor<T>>,
    pub subjects: Vec<SubjectData<T>>,
}

impl<T: Scalar> Default for TrainingData<T> {
    fn default() -> Self {
        TrainingData { stimulus_ids: Vec::new(), raw: Vec::new(), subjects: Vec::new() }
    }
}

fn repeats<T: Scalar>(m: &ResponseMatrix<T>, stimuli: &[usize]) -> Vec<Vec<Vec<T>>> {
    let by = m.trials_by_stimulus();
    stimuli
        .iter()
        .map(|s| by.get(s).map(|ts| ts.iter().map(|&t| m.row(t).to_vec()).collect()).unwrap_or_default())
        .collect()
}

impl<T: Scalar> TrainingData<T> {
    /// Adds a dataset whose stimuli are given as frozen backbone output
    /// (manifest order) and responses as raw matrices (subject order).
    pub fn push_dataset(
        &mut self,
        manifest: &DatasetManifest,
        raw: Vec<FeatureTensor<T>>,
        responses: Vec<ResponseMatrix<T>>,
        zscore: bool,
    ) -> Result<()> {
        manifest.validate()?;
        ensure!(raw.len() == manifest.stimuli.len(), Dimension, "{} feature tensors for {} stimuli", raw.len(), manifest.stimuli.len());
        ensure!(
            responses.len() == manifest.subjects.len(),
            Dimension,
            "{} response matrices for {} subjects",
            responses.len(),
            manifest.subjects.len()
        );
        if let Some(first) = self.raw.first().or(raw.first()) {
            for r in &raw {
                ensure!(
                    (r.levels, r.patches, r.channels) == (first.levels, first.patches, first.channels),
                    Dimension,
                    "feature geometry differs across stimuli"
                );
            }
        }
        for s in &manifest.subjects {
            ensure!(
                self.subjects.iter().all(|o| o.subject_id != s.subject_id),
                Registry,
                "subject {:?} appears in more than one dataset",
                s.subject_id
            );
        }
        let offset = self.raw.len();
        self.stimulus_ids
            .extend(manifest.stimuli.iter().map(|s| format!("{}/{}", manifest.dataset_id, s.id)));
        self.raw.extend(raw);
        for (entry, m) in manifest.subjects.iter().zip(responses) {
            ensure!(
                m.voxels == entry.voxel_count && m.trials == entry.trials.len(),
                Dimension,
                "responses for {:?} are {}x{}",
                entry.subject_id,
                m.trials,
                m.voxels
            );
            let m = if zscore { zscore_per_run(&m)? } else { m };
            let train_targets = m.average_repeats(&entry.train)?;
            let test_targets = m.average_repeats(&entry.test)?;
            let test_repeats = repeats(&m, &entry.test);
            self.subjects.push(SubjectData {
                subject_id: entry.subject_id.clone(),
                dataset_id: manifest.dataset_id.clone(),
                voxel_count: entry.voxel_count,
                train: entry.train.iter().map(|i| i + offset).collect(),
                train_targets,
                test: entry.test.iter().map(|i| i + offset).collect(),
                test_targets,
                test_repeats,
            });
        }
        Ok(())
    }

    /// Reads a manifest and everything it references. Stimuli with a feature
    /// file use it; the rest are run through `backbone`.
    pub fn load_dataset(&mut self, manifest_path: &Path, backbone: &Backbone<T>, zscore: bool) -> Result<()> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        manifest.validate_files(base)?;
        let mut raw = Vec::with_capacity(manifest.stimuli.len());
        for s in &manifest.stimuli {
            let f = match (&s.features, &s.image) {
                (Some(p), _) => load_features(&base.join(p))?,
                (None, Some(p)) => backbone.raw_features(&Image::load(&base.join(p))?)?,
                (None, None) => unreachable!("validated manifest"),
            };
            backbone.check_raw(&f)?;
            raw.push(f);
        }
        let mut responses = Vec::with_capacity(manifest.subjects.len());
        for s in &manifest.subjects {
            let run = ResponseMatrix::<T>::run_map(&s.runs, s.trials.len());
            responses.push(ResponseMatrix::load(&base.join(&s.responses), s.trials.clone(), run)?);
        }
        self.push_dataset(&manifest, raw, responses, zscore)
    }

    pub fn subject(&self, subject_id: &str) -> Result<&SubjectData<T>> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == subject_id)
            .ok_or_else(|| crate::Error::Lookup(format!("no data for subject {subject_id:?}")))
    }

    pub fn subject_index(&self, subject_id: &str) -> Result<usize> {
        self.subjects
            .iter()
            .position(|s| s.subject_id == subject_id)
            .ok_or_else(|| crate::Error::Lookup(format!("no data for subject {subject_id:?}")))
    }

    /// Keeps only the first `n` training stimuli of one subject.
    pub fn truncate_train(&mut self, subject_id: &str, n: usize) -> Result<()> {
        let i = self.subject_index(subject_id)?;
        let s = &mut self.subjects[i];
        s.train.truncate(n);
        s.train_targets.truncate(n);
        Ok(())
    }

    /// Restricts the data to the named subjects, in the given order.
    pub fn only(&self, subject_ids: &[&str]) -> Result<Self> {
        let subjects = subject_ids.iter().map(|id| self.subject(id).cloned()).collect::<Result<_>>()?;
        Ok(TrainingData { stimulus_ids: self.stimulus_ids.clone(), raw: self.raw.clone(), subjects })
    }

    /// Pool (subject, example) pairs in canonical order.
    pub fn training_pairs(&self) -> Vec<(usize, usize)> {
        self.subjects
            .iter()
            .enumerate()
            .flat_map(|(s, d)| (0..d.train.len()).map(move |j| (s, j)))
            .collect()
    }

    /// Voxel counts per subject id.
    pub fn voxel_counts(&self) -> BTreeMap<String, usize> {
        self.subjects.iter().map(|s| (s.subject_id.clone(), s.voxel_count)).collect()
    }
}

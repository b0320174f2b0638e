//! Per-voxel state: subjects, their embedding tables, and dataset manifests.
//!
//! Nothing here assumes that subjects share a voxel count.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::format::Archive;
use crate::preprocess::ResponseHeader;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord<T> {
    pub subject_id: String,
    pub dataset_id: String,
    pub voxel_count: usize,
    /// `voxel_count × E`
    pub embeddings: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub subject_id: String,
    pub voxel_index: usize,
}

impl VoxelKey {
    pub fn new(subject_id: impl Into<String>, voxel_index: usize) -> Self {
        VoxelKey { subject_id: subject_id.into(), voxel_index }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry<T> {
    embedding_dim: usize,
    subjects: Vec<SubjectRecord<T>>,
}

#[derive(Serialize, Deserialize)]
struct SubjectMeta {
    subject_id: String,
    dataset_id: String,
    voxel_count: usize,
    trainable: bool,
}

impl<T: Scalar> Registry<T> {
    pub fn new(embedding_dim: usize) -> Self {
        Registry { embedding_dim, subjects: Vec::new() }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn subjects(&self) -> &[SubjectRecord<T>] {
        &self.subjects
    }

    pub fn subjects_mut(&mut self) -> &mut [SubjectRecord<T>] {
        &mut self.subjects
    }

    /// Adds a subject whose embeddings are drawn i.i.d. from `N(0, 1/√E)`.
    pub fn register_subject(
        &mut self,
        subject_id: &str,
        dataset_id: &str,
        voxel_count: usize,
        rng: &mut impl Rng,
    ) -> Result<&SubjectRecord<T>> {
        ensure!(voxel_count >= 1, Registry, "subject {subject_id:?} has no voxels");
        if self.subjects.iter().any(|s| s.subject_id == subject_id) {
            return Err(Error::Registry(format!("subject {subject_id:?} already registered")));
        }
        let e = self.embedding_dim;
        let normal = Normal::new(0.0, 1.0 / (e as f64).sqrt()).unwrap();
        let embeddings = Tensor::from_fn(voxel_count, e, |_, _| T::lit(normal.sample(rng)));
        self.subjects.push(SubjectRecord {
            subject_id: subject_id.to_string(),
            dataset_id: dataset_id.to_string(),
            voxel_count,
            embeddings,
            trainable: true,
        });
        Ok(self.subjects.last().unwrap())
    }

    pub fn subject_index(&self, subject_id: &str) -> Result<usize> {
        self.subjects
            .iter()
            .position(|s| s.subject_id == subject_id)
            .ok_or_else(|| Error::Lookup(format!("unknown subject {subject_id:?}")))
    }

    pub fn subject(&self, subject_id: &str) -> Result<&SubjectRecord<T>> {
        Ok(&self.subjects[self.subject_index(subject_id)?])
    }

    pub fn subject_mut(&mut self, subject_id: &str) -> Result<&mut SubjectRecord<T>> {
        let i = self.subject_index(subject_id)?;
        Ok(&mut self.subjects[i])
    }

    /// The live embedding row for a voxel.
    pub fn get_embedding(&self, key: &VoxelKey) -> Result<&[T]> {
        let s = self.subject(&key.subject_id)?;
        ensure!(
            key.voxel_index < s.voxel_count,
            Lookup,
            "voxel {} out of range for subject {:?} with {} voxels",
            key.voxel_index,
            key.subject_id,
            s.voxel_count
        );
        Ok(s.embeddings.row(key.voxel_index))
    }

    pub fn embedding_mut(&mut self, key: &VoxelKey) -> Result<&mut [T]> {
        let s = self.subject_mut(&key.subject_id)?;
        ensure!(
            key.voxel_index < s.voxel_count,
            Lookup,
            "voxel {} out of range for subject {:?}",
            key.voxel_index,
            key.subject_id
        );
        Ok(s.embeddings.row_mut(key.voxel_index))
    }

    pub fn total_voxels(&self) -> usize {
        self.subjects.iter().map(|s| s.voxel_count).sum()
    }

    pub(crate) fn tensor_name(subject_id: &str) -> String {
        format!("embeddings/{subject_id}")
    }

    /// Appends the embedding tables to an archive; returns the metadata to store.
    pub(crate) fn write_into(&self, archive: &mut Archive<T>) -> serde_json::Value {
        let meta: Vec<SubjectMeta> = self
            .subjects
            .iter()
            .map(|s| {
                archive.push(Self::tensor_name(&s.subject_id), s.embeddings.clone());
                SubjectMeta {
                    subject_id: s.subject_id.clone(),
                    dataset_id: s.dataset_id.clone(),
                    voxel_count: s.voxel_count,
                    trainable: s.trainable,
                }
            })
            .collect();
        serde_json::json!({ "embedding_dim": self.embedding_dim, "subjects": meta })
    }

    pub(crate) fn read_from(archive: &Archive<T>, meta: &serde_json::Value) -> Result<Self> {
        let embedding_dim = meta
            .get("embedding_dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("registry metadata lacks embedding_dim".into()))?
            as usize;
        let subjects: Vec<SubjectMeta> = serde_json::from_value(
            meta.get("subjects").cloned().unwrap_or(serde_json::Value::Null),
        )?;
        let mut reg = Registry::new(embedding_dim);
        for s in subjects {
            let embeddings = archive.get(&Self::tensor_name(&s.subject_id))?.clone();
            ensure!(
                embeddings.shape() == [s.voxel_count, embedding_dim],
                Format,
                "embedding table for {:?} has shape {:?}",
                s.subject_id,
                embeddings.shape()
            );
            reg.subjects.push(SubjectRecord {
                subject_id: s.subject_id,
                dataset_id: s.dataset_id,
                voxel_count: s.voxel_count,
                embeddings,
                trainable: s.trainable,
            });
        }
        Ok(reg)
    }

    /// Values after a round trip through 32-bit storage.
    pub fn round_f32(&mut self) {
        for s in &mut self.subjects {
            s.embeddings = s.embeddings.round_f32();
        }
    }
}

pub fn save_registry<T: Scalar>(registry: &Registry<T>, path: &Path) -> Result<()> {
    let mut archive = Archive::new(serde_json::Value::Null);
    let meta = registry.write_into(&mut archive);
    archive.metadata = serde_json::json!({ "kind": "registry", "registry": meta });
    archive.save(path)
}

pub fn load_registry<T: Scalar>(path: &Path) -> Result<Registry<T>> {
    let archive = Archive::load(path)?;
    let meta = archive
        .metadata
        .get("registry")
        .cloned()
        .ok_or_else(|| Error::Format("archive holds no registry".into()))?;
    Registry::read_from(&archive, &meta)
}

/// One stimulus: a pixel image, a precomputed feature file, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

/// Trial structure for one subject of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub voxel_count: usize,
    /// `UBER` file, `trials × voxel_count`.
    pub responses: PathBuf,
    /// Stimulus index (into `stimuli`) shown on each trial.
    pub trials: Vec<usize>,
    /// Half-open trial ranges `[start, end)`; they partition the trials.
    pub runs: Vec<[usize; 2]>,
    /// Stimulus indices used for training.
    pub train: Vec<usize>,
    /// Stimulus indices held out for evaluation.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub stimuli: Vec<StimulusEntry>,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::format::write_file(path, text.as_bytes())
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.stimuli.is_empty(), Config, "{}: no stimuli", self.dataset_id);
        let mut ids = BTreeSet::new();
        for s in &self.stimuli {
            ensure!(ids.insert(&s.id), Config, "duplicate stimulus id {:?}", s.id);
            ensure!(
                s.image.is_some() || s.features.is_some(),
                Config,
                "stimulus {:?} has neither image nor features",
                s.id
            );
        }
        let mut subjects = BTreeSet::new();
        for sub in &self.subjects {
            let who = &sub.subject_id;
            ensure!(subjects.insert(who), Config, "duplicate subject {who:?}");
            ensure!(sub.voxel_count >= 1, Config, "{who}: no voxels");
            let n = self.stimuli.len();
            ensure!(
                sub.trials.iter().all(|&s| s < n),
                Config,
                "{who}: trial refers to unknown stimulus"
            );
            let mut next = 0;
            for r in &sub.runs {
                ensure!(
                    r[0] == next && r[1] > r[0],
                    Config,
                    "{who}: runs must partition the trials in order, got {:?}",
                    sub.runs
                );
                next = r[1];
            }
            ensure!(
                next == sub.trials.len(),
                Config,
                "{who}: runs cover {} of {} trials",
                next,
                sub.trials.len()
            );
            let shown: BTreeSet<usize> = sub.trials.iter().copied().collect();
            let train: BTreeSet<usize> = sub.train.iter().copied().collect();
            let test: BTreeSet<usize> = sub.test.iter().copied().collect();
            ensure!(train.len() == sub.train.len(), Config, "{who}: duplicate train stimulus");
            ensure!(test.len() == sub.test.len(), Config, "{who}: duplicate test stimulus");
            ensure!(train.is_disjoint(&test), Config, "{who}: train and test overlap");
            ensure!(
                train.iter().chain(&test).all(|s| shown.contains(s)),
                Config,
                "{who}: split refers to a stimulus never shown"
            );
        }
        Ok(())
    }

    /// Structural checks plus response-file headers, with paths relative to `base`.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        self.validate()?;
        for sub in &self.subjects {
            let header = ResponseHeader::read(&base.join(&sub.responses))?;
            ensure!(
                header.trials == sub.trials.len(),
                Config,
                "{}: response file has {} rows for {} trials",
                sub.subject_id,
                header.trials,
                sub.trials.len()
            );
            ensure!(
                header.voxels == sub.voxel_count,
                Config,
                "{}: response file has {} voxels, manifest says {}",
                sub.subject_id,
                header.voxels,
                sub.voxel_count
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registration_and_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reg = Registry::<f64>::new(4);
        let rec = reg.register_subject("s1", "d", 1, &mut rng).unwrap();
        assert_eq!(rec.embeddings.shape(), &[1, 4]);
        assert!(rec.embeddings.is_finite());
        reg.register_subject("vim1", "vim1", 7000, &mut rng).unwrap();
        reg.register_subject("ghd", "imagenet", 5000, &mut rng).unwrap();
        assert_eq!(reg.subject("vim1").unwrap().voxel_count, 7000);
        assert_eq!(reg.subject("ghd").unwrap().voxel_count, 5000);
        assert!(matches!(reg.register_subject("s1", "d", 3, &mut rng), Err(Error::Registry(_))));

        let key = VoxelKey::new("s1", 0);
        reg.embedding_mut(&key).unwrap().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reg.get_embedding(&key).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(reg.get_embedding(&VoxelKey::new("s1", 1)), Err(Error::Lookup(_))));
        assert!(matches!(reg.get_embedding(&VoxelKey::new("nope", 0)), Err(Error::Lookup(_))));
    }

    #[test]
    fn init_variance_is_one_over_e() {
        let mut reg = Registry::<f64>::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        reg.register_subject("s", "d", 20_000, &mut rng).unwrap();
        let d = reg.subject("s").unwrap().embeddings.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((v - 0.25).abs() < 0.01, "variance {v}");
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reg.ubec");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reg = Registry::<f64>::new(5);
        reg.register_subject("a", "d1", 7, &mut rng).unwrap();
        reg.register_subject("b", "d2", 3, &mut rng).unwrap();
        reg.subject_mut("b").unwrap().trainable = false;
        save_registry(&reg, &path).unwrap();
        let mut back: Registry<f64> = load_registry(&path).unwrap();
        let mut rounded = reg.clone();
        rounded.round_f32();
        assert_eq!(back, rounded);

        back.register_subject("c", "d3", 2, &mut rng).unwrap();
        assert_eq!(back.subjects()[..2], rounded.subjects()[..]);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_registry::<f64>(&path), Err(Error::Format(_))));
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            dataset_id: "d".into(),
            stimuli: (0..3)
                .map(|i| StimulusEntry { id: format!("s{i}"), image: Some(format!("{i}.png").into()), features: None })
                .collect(),
            subjects: vec![SubjectEntry {
                subject_id: "a".into(),
                voxel_count: 2,
                responses: "a.uber".into(),
                trials: vec![0, 1, 2, 2],
                runs: vec![[0, 2], [2, 4]],
                train: vec![0, 1],
                test: vec![2],
            }],
        }
    }

    #[test]
    fn manifest_validation() {
        assert!(manifest().validate().is_ok());
        let mut m = manifest();
        m.subjects[0].runs = vec![[0, 3]];
        assert!(m.validate().is_err());
        let mut m = manifest();
        m.subjects[0].test = vec![1];
        assert!(m.validate().is_err());
        let json = serde_json::to_string(&manifest()).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, manifest());
        let with_label = json.replacen("\"voxel_count\"", "\"labels\":[1],\"voxel_count\"", 1);
        assert!(serde_json::from_str::<DatasetManifest>(&with_label).is_err());
    }
}

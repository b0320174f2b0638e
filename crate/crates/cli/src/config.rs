//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ube_core::backbone::BackboneConfig;
use ube_core::eval::EvalOptions;
use ube_core::model::EncoderConfig;
use ube_core::synthetic::DatasetSpec;
use ube_core::train::engine::TrainConfig;
use ube_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub archetypes: usize,
    pub subjects: usize,
    pub voxels: usize,
    pub jitter: f64,
    pub noise: f64,
    pub dataset: DatasetSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { archetypes: 6, subjects: 2, voxels: 300, jitter: 0.1, noise: 0.5, dataset: DatasetSpec::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Keep only the first this many training stimuli of each new subject.
    pub examples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k: usize,
    pub top_n: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: 6, top_n: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and `eval.seed` when set.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub manifests: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub simulate: SimulateConfig,
    pub transfer: TransferConfig,
    pub cluster: ClusterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("ube-out"),
            manifests: Vec::new(),
            checkpoint: None,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            simulate: SimulateConfig::default(),
            transfer: TransferConfig::default(),
            cluster: ClusterConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the top-level seed and checks every section.
    pub fn finalize(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.eval.seed = seed;
        }
        self.backbone.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        let s = &self.simulate;
        if s.archetypes == 0 || s.subjects == 0 || s.voxels == 0 {
            return Err(Error::Config("simulate needs at least one archetype, subject and voxel".into()));
        }
        if !(s.jitter >= 0.0 && s.noise >= 0.0) {
            return Err(Error::Config("simulate.jitter and simulate.noise must be non-negative".into()));
        }
        if self.cluster.k == 0 {
            return Err(Error::Config("cluster.k must be >= 1".into()));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("epochs = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[train]\nepoch = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn sections_and_seed_override() {
        let c = RunConfig::parse("seed = 9\n[train]\nepochs = 2\nseed = 1\n[backbone]\nlevels = 3\n")
            .unwrap()
            .finalize()
            .unwrap();
        assert_eq!((c.train.epochs, c.train.seed, c.eval.seed, c.backbone.levels), (2, 9, 9, 3));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig::parse("[train]\nalpha = 2.0\n").unwrap();
        assert!(matches!(c.finalize(), Err(Error::Config(_))));
    }
}

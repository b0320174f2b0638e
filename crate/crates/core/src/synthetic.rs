//! Synthetic subjects with known voxel functionality.
//!
//! An archetype fixes a level preference (a point on the simplex), a
//! Gaussian receptive field on the patch grid and a tuning direction in the
//! frozen backbone's raw feature space. Voxels are jittered copies of
//! archetypes, and their noiseless response to a stimulus is
//!
//! `gain · Σ_ℓ w_ℓ Σ_p s_p (tuning · f_{ℓ,p})`
//!
//! with `s` the normalized receptive field. Trial noise is Gaussian.
//! Archetype labels are kept next to, never inside, the dataset manifest.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureTensor, Image};
use crate::error::{ensure, Result};
use crate::preprocess::ResponseMatrix;
use crate::registry::{DatasetManifest, StimulusEntry, SubjectEntry};
use crate::scalar::{dot, norm};

const LAYER_CONCENTRATION: f64 = 0.3;
const MAX_TUNING_COSINE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub layer_weights: Vec<f64>,
    /// (row, col) in patch units.
    pub spatial_center: (f64, f64),
    pub spatial_sigma: f64,
    pub tuning: Vec<f64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthVoxel {
    pub archetype_id: usize,
    pub layer_weights: Vec<f64>,
    pub spatial_center: (f64, f64),
    pub spatial_sigma: f64,
    pub tuning: Vec<f64>,
    pub gain: f64,
    pub noise_sigma: f64,
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
        let len = norm(&v);
        if len > 1e-9 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// `n` archetypes for a backbone with `levels` levels, a `grid × grid`
/// patch grid and `raw_channels` raw channels.
pub fn generate_archetypes(
    n: usize,
    levels: usize,
    grid: usize,
    raw_channels: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Archetype>> {
    ensure!(n >= 1, Config, "need at least one archetype");
    ensure!(levels >= 1 && grid >= 1 && raw_channels >= 1, Config, "degenerate feature geometry");
    let span = (grid - 1) as f64;
    let mut out: Vec<Archetype> = Vec::with_capacity(n);
    for i in 0..n {
        let layer_weights = if levels == 1 {
            vec![1.0]
        } else {
            Dirichlet::new(&vec![LAYER_CONCENTRATION; levels]).unwrap().sample(rng)
        };
        // best of several uniform candidates, measured by distance to existing centres
        let mut best = (rng.gen_range(0.0..=span), rng.gen_range(0.0..=span));
        let mut best_d = f64::MIN;
        for _ in 0..16 {
            let c = (rng.gen_range(0.0..=span), rng.gen_range(0.0..=span));
            let d = out
                .iter()
                .map(|a| (a.spatial_center.0 - c.0).powi(2) + (a.spatial_center.1 - c.1).powi(2))
                .fold(f64::MAX, f64::min);
            if d > best_d {
                best = c;
                best_d = d;
            }
        }
        let spatial_sigma = rng.gen_range(0.5..=(0.25 * grid as f64 + 0.5));
        let mut tuning = unit_vector(raw_channels, rng);
        for _ in 0..10_000 {
            if out.iter().all(|a| cosine(&a.tuning, &tuning) < MAX_TUNING_COSINE) {
                break;
            }
            tuning = unit_vector(raw_channels, rng);
        }
        out.push(Archetype {
            layer_weights,
            spatial_center: best,
            spatial_sigma,
            tuning,
            label: format!("A{i:02}"),
        });
    }
    Ok(out)
}

/// `voxels` voxels drawn uniformly from `archetypes`, each jittered by
/// `jitter` (patches for the centre, relative scale for the rest).
pub fn generate_subject(
    archetypes: &[Archetype],
    voxels: usize,
    jitter: f64,
    grid: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GroundTruthVoxel>> {
    ensure!(voxels >= 1, Config, "subject needs at least one voxel");
    ensure!(!archetypes.is_empty(), Config, "no archetypes");
    ensure!(jitter >= 0.0, Config, "jitter must be non-negative");
    let span = (grid.max(1) - 1) as f64;
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(voxels);
    for _ in 0..voxels {
        let id = rng.gen_range(0..archetypes.len());
        let a = &archetypes[id];
        let dim = a.tuning.len();
        let gain = rng.gen_range(0.8..1.2);
        if jitter == 0.0 {
            out.push(GroundTruthVoxel {
                archetype_id: id,
                layer_weights: a.layer_weights.clone(),
                spatial_center: a.spatial_center,
                spatial_sigma: a.spatial_sigma,
                tuning: a.tuning.clone(),
                gain,
                noise_sigma: 0.0,
            });
            continue;
        }
        let center = (
            (a.spatial_center.0 + jitter * n.sample(rng)).clamp(0.0, span),
            (a.spatial_center.1 + jitter * n.sample(rng)).clamp(0.0, span),
        );
        let sigma = a.spatial_sigma * (0.2 * jitter * n.sample(rng)).exp();
        let mut tuning: Vec<f64> = a
            .tuning
            .iter()
            .map(|&t| t + jitter / (dim as f64).sqrt() * n.sample(rng))
            .collect();
        let len = norm(&tuning);
        tuning.iter_mut().for_each(|t| *t /= len);
        let mut lw: Vec<f64> = a.layer_weights.iter().map(|&w| w * (jitter * n.sample(rng)).exp()).collect();
        let total: f64 = lw.iter().sum();
        lw.iter_mut().for_each(|w| *w /= total);
        out.push(GroundTruthVoxel {
            archetype_id: id,
            layer_weights: lw,
            spatial_center: center,
            spatial_sigma: sigma,
            tuning,
            gain,
            noise_sigma: 0.0,
        });
    }
    Ok(out)
}

/// Normalized Gaussian receptive field over a `grid × grid` patch grid.
pub fn spatial_profile(center: (f64, f64), sigma: f64, grid: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..grid * grid)
        .map(|p| {
            let (r, c) = ((p / grid) as f64, (p % grid) as f64);
            let d2 = (r - center.0).powi(2) + (c - center.1).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Noiseless response before the gain.
pub fn unit_signal(voxel: &GroundTruthVoxel, raw: &FeatureTensor<f64>) -> f64 {
    let grid = (raw.patches as f64).sqrt().round() as usize;
    let s = spatial_profile(voxel.spatial_center, voxel.spatial_sigma, grid);
    let mut total = 0.0;
    for (l, &w) in voxel.layer_weights.iter().enumerate().take(raw.levels) {
        if w == 0.0 {
            continue;
        }
        let level = raw.level_slice(l);
        let mut acc = 0.0;
        for (p, &sp) in s.iter().enumerate() {
            acc += sp * dot(&voxel.tuning, &level[p * raw.channels..(p + 1) * raw.channels]);
        }
        total += w * acc;
    }
    total
}

/// One trial's response: signal times gain plus Gaussian noise.
pub fn simulate_response(voxel: &GroundTruthVoxel, raw: &FeatureTensor<f64>, rng: &mut impl Rng) -> f64 {
    let signal = voxel.gain * unit_signal(voxel, raw);
    if voxel.noise_sigma > 0.0 {
        signal + voxel.noise_sigma * Normal::new(0.0, 1.0).unwrap().sample(rng)
    } else {
        signal
    }
}

/// Rescales each gain so the noiseless signal has standard deviation equal
/// to the voxel's current gain over `stimuli`.
pub fn calibrate_gains(voxels: &mut [GroundTruthVoxel], stimuli: &[&FeatureTensor<f64>]) {
    for v in voxels {
        let xs: Vec<f64> = stimuli.iter().map(|f| unit_signal(v, f)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        if sd > 0.0 {
            v.gain /= sd;
        }
    }
}

/// Smooth random stimulus: background, Gaussian blobs and a windowed grating.
pub fn generate_image(height: usize, width: usize, color: bool, rng: &mut impl Rng) -> Image {
    let channels = if color { 3 } else { 1 };
    let scale = height.min(width) as f64;
    let bg: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.3..0.7)).collect();
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..rng.gen_range(1..=4))
        .map(|_| {
            let amp = rng.gen_range(-0.45..0.45);
            (
                rng.gen_range(0.0..height as f64),
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.04..0.25) * scale,
                (0..channels).map(|_| amp * rng.gen_range(0.6..1.0)).collect(),
            )
        })
        .collect();
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.1..0.6);
    let g_amp = rng.gen_range(0.0..0.25);
    let (gy, gx, gr) = (
        rng.gen_range(0.0..height as f64),
        rng.gen_range(0.0..width as f64),
        rng.gen_range(0.15..0.5) * scale,
    );
    let mut data = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64, x as f64);
            let phase = freq * (fx * theta.cos() + fy * theta.sin());
            let window = (-((fy - gy).powi(2) + (fx - gx).powi(2)) / (2.0 * gr * gr)).exp();
            let grating = g_amp * window * phase.sin();
            for c in 0..channels {
                let mut v = bg[c] + grating;
                for (by, bx, br, amps) in &blobs {
                    let d2 = (fy - by).powi(2) + (fx - bx).powi(2);
                    v += amps[c] * (-d2 / (2.0 * br * br)).exp();
                }
                data.push(v as f32);
            }
        }
    }
    Image::new(height, width, channels, data).expect("consistent dims").quantized()
}

/// Layout of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub dataset_id: String,
    /// Training stimuli per subject (disjoint across subjects).
    pub n_train: usize,
    /// Test stimuli shared by all subjects.
    pub n_test: usize,
    pub repeats_test: usize,
    pub run_length: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub color: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            dataset_id: "synthetic".into(),
            n_train: 100,
            n_test: 50,
            repeats_test: 3,
            run_length: 50,
            image_height: 64,
            image_width: 64,
            color: false,
        }
    }
}

/// A simulated subject: ground truth plus the id it will carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub voxels: Vec<GroundTruthVoxel>,
}

impl SubjectTruth {
    pub fn labels(&self) -> Vec<usize> {
        self.voxels.iter().map(|v| v.archetype_id).collect()
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.voxels.iter_mut().for_each(|v| v.noise_sigma = sigma);
        self
    }
}

/// Everything a simulated dataset consists of, held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    /// Frozen backbone output per stimulus (what the simulator saw).
    pub raw: Vec<FeatureTensor<f64>>,
    /// Raw (not z-scored) responses per subject, manifest order.
    pub responses: Vec<ResponseMatrix<f64>>,
    /// Ground truth per subject, manifest order. Evaluation only.
    pub truth: Vec<SubjectTruth>,
}

/// Splits `n` trials into runs of `len`, folding a short tail into the last run.
fn run_ranges(n: usize, len: usize) -> Vec<[usize; 2]> {
    let len = len.max(2);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + len).min(n);
        out.push([start, end]);
        start = end;
    }
    if out.len() > 1 && out.last().map(|r| r[1] - r[0] < 2).unwrap_or(false) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap()[1] = tail[1];
    }
    out
}

/// Simulates stimuli, trials and responses for `subjects`.
///
/// Stimuli `0..n_test` are the shared test set; each subject then gets
/// `n_train` stimuli of its own. Test stimuli are shown `repeats_test` times,
/// training stimuli once, in a shuffled order cut into runs.
pub fn generate_dataset(
    spec: &DatasetSpec,
    subjects: Vec<SubjectTruth>,
    backbone: &Backbone<f64>,
    rng: &mut impl Rng,
) -> Result<SyntheticDataset> {
    ensure!(spec.n_train >= 1 && spec.n_test >= 1, Config, "stimulus counts must be >= 1");
    ensure!(spec.repeats_test >= 1, Config, "repeats_test must be >= 1");
    ensure!(!subjects.is_empty(), Config, "no subjects");
    let total = spec.n_test + spec.n_train * subjects.len();
    let mut images = Vec::with_capacity(total);
    let mut raw = Vec::with_capacity(total);
    let mut stimuli = Vec::with_capacity(total);
    for i in 0..total {
        let img = generate_image(spec.image_height, spec.image_width, spec.color, rng);
        raw.push(backbone.raw_features(&img)?);
        images.push(img);
        let id = format!("{}-{:05}", spec.dataset_id, i);
        stimuli.push(StimulusEntry {
            image: Some(format!("stimuli/{id}.png").into()),
            features: Some(format!("features/{id}.ubef").into()),
            id,
        });
    }
    let test: Vec<usize> = (0..spec.n_test).collect();
    let mut entries = Vec::new();
    let mut responses = Vec::new();
    let mut truth = Vec::new();
    for (s, mut subject) in subjects.into_iter().enumerate() {
        let train: Vec<usize> = (0..spec.n_train).map(|k| spec.n_test + s * spec.n_train + k).collect();
        let mut trials: Vec<usize> = train.clone();
        for _ in 0..spec.repeats_test {
            trials.extend(&test);
        }
        trials.shuffle(rng);
        let runs = run_ranges(trials.len(), spec.run_length);
        let shown: Vec<&FeatureTensor<f64>> = train.iter().chain(&test).map(|&i| &raw[i]).collect();
        calibrate_gains(&mut subject.voxels, &shown);
        let v = subject.voxels.len();
        let mut data = Vec::with_capacity(trials.len() * v);
        for &stim in &trials {
            for voxel in &subject.voxels {
                data.push(simulate_response(voxel, &raw[stim], rng));
            }
        }
        let run_map = ResponseMatrix::<f64>::run_map(&runs, trials.len());
        responses.push(ResponseMatrix::new(trials.len(), v, data, trials.clone(), run_map)?);
        entries.push(SubjectEntry {
            subject_id: subject.subject_id.clone(),
            voxel_count: v,
            responses: format!("responses/{}.uber", subject.subject_id).into(),
            trials,
            runs,
            train,
            test: test.clone(),
        });
        truth.push(subject);
    }
    let manifest = DatasetManifest { dataset_id: spec.dataset_id.clone(), stimuli, subjects: entries };
    manifest.validate()?;
    Ok(SyntheticDataset { manifest, images, raw, responses, truth })
}

impl SyntheticDataset {
    /// Writes `manifest.json`, stimuli, feature files, responses and the
    /// ground truth (under `truth/`, outside the manifest).
    pub fn write(&self, dir: &Path) -> Result<()> {
        for ((entry, img), raw) in self.manifest.stimuli.iter().zip(&self.images).zip(&self.raw) {
            if let Some(p) = &entry.image {
                img.save_png(&dir.join(p))?;
            }
            if let Some(p) = &entry.features {
                raw.save(&dir.join(p))?;
            }
        }
        for (entry, resp) in self.manifest.subjects.iter().zip(&self.responses) {
            resp.save(&dir.join(&entry.responses))?;
        }
        for t in &self.truth {
            let text = serde_json::to_string_pretty(t)?;
            crate::format::write_file(&dir.join(format!("truth/{}.json", t.subject_id)), text.as_bytes())?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }
}

pub fn load_truth(path: &Path) -> Result<SubjectTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn archetype_basics() {
        let a = generate_archetypes(1, 5, 8, 16, &mut rng(0)).unwrap();
        assert_eq!(a.len(), 1);
        let s: f64 = a[0].layer_weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12 && a[0].layer_weights.iter().all(|&w| w >= 0.0));
        assert!((norm(&a[0].tuning) - 1.0).abs() < 1e-12);
        assert!(a[0].spatial_sigma > 0.0);
        assert_eq!(
            generate_archetypes(4, 5, 8, 16, &mut rng(3)).unwrap(),
            generate_archetypes(4, 5, 8, 16, &mut rng(3)).unwrap()
        );
    }

    #[test]
    fn archetype_tunings_are_separated() {
        let a = generate_archetypes(20, 5, 8, 16, &mut rng(1)).unwrap();
        for i in 0..20 {
            for j in 0..i {
                assert!(cosine(&a[i].tuning, &a[j].tuning) < 0.9);
            }
        }
    }

    #[test]
    fn zero_jitter_copies_archetype() {
        let a = generate_archetypes(3, 4, 4, 8, &mut rng(2)).unwrap();
        let vox = generate_subject(&a, 50, 0.0, 4, &mut rng(3)).unwrap();
        for v in &vox {
            let arch = &a[v.archetype_id];
            assert_eq!(v.tuning, arch.tuning);
            assert_eq!(v.spatial_center, arch.spatial_center);
            assert_eq!(v.layer_weights, arch.layer_weights);
        }
    }

    #[test]
    fn subjects_share_labels_not_parameters() {
        let a = generate_archetypes(3, 4, 4, 8, &mut rng(2)).unwrap();
        let s1 = generate_subject(&a, 40, 0.3, 4, &mut rng(10)).unwrap();
        let s2 = generate_subject(&a, 40, 0.3, 4, &mut rng(11)).unwrap();
        for v in &s1 {
            assert!(s2.iter().all(|w| w.tuning != v.tuning));
        }
        let l1: std::collections::BTreeSet<_> = s1.iter().map(|v| v.archetype_id).collect();
        let l2: std::collections::BTreeSet<_> = s2.iter().map(|v| v.archetype_id).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn label_histogram_within_multinomial_bounds() {
        let k = 6;
        let n = 6000;
        let a = generate_archetypes(k, 3, 4, 8, &mut rng(4)).unwrap();
        let vox = generate_subject(&a, n, 0.1, 4, &mut rng(5)).unwrap();
        let mut counts = vec![0usize; k];
        vox.iter().for_each(|v| counts[v.archetype_id] += 1);
        let p = 1.0 / k as f64;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sd, "count {c} vs {mean}±{}", 3.0 * sd);
        }
    }

    fn raw(levels: usize, patches: usize, ch: usize, seed: u64) -> FeatureTensor<f64> {
        let mut r = rng(seed);
        FeatureTensor::new(levels, patches, ch, (0..levels * patches * ch).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn response_cases() {
        let a = generate_archetypes(2, 3, 4, 6, &mut rng(6)).unwrap();
        let mut v = generate_subject(&a, 1, 0.2, 4, &mut rng(7)).unwrap().remove(0);
        let f = raw(3, 16, 6, 8);

        // triple-sum oracle
        let s = spatial_profile(v.spatial_center, v.spatial_sigma, 4);
        let mut want = 0.0;
        for l in 0..3 {
            for p in 0..16 {
                for c in 0..6 {
                    want += v.gain * v.layer_weights[l] * s[p] * v.tuning[c] * f.get(l, p, c);
                }
            }
        }
        let got = simulate_response(&v, &f, &mut rng(0));
        assert!((got - want).abs() < 1e-12);

        v.gain *= 2.0;
        let doubled = simulate_response(&v, &f, &mut rng(0));
        assert!((doubled - 2.0 * got).abs() < 1e-12);

        // tuning orthogonal to every feature vector
        let mut ortho = f.clone();
        for l in 0..3 {
            for p in 0..16 {
                let base = (l * 16 + p) * 6;
                let proj = dot(&v.tuning, &ortho.data[base..base + 6]);
                for c in 0..6 {
                    ortho.data[base + c] -= proj * v.tuning[c];
                }
            }
        }
        assert!(simulate_response(&v, &ortho, &mut rng(0)).abs() < 1e-12);
    }

    #[test]
    fn dataset_structure() {
        let cfg = BackboneConfig { levels: 3, patches: 16, channels: 4, raw_channels: 8, adapter_rank: 2, patch_pixels: 4, seed: 1 };
        let bb = Backbone::new(cfg).unwrap();
        let a = generate_archetypes(3, 3, 4, 8, &mut rng(1)).unwrap();
        let subjects = (0..2)
            .map(|i| SubjectTruth {
                subject_id: format!("sub{i}"),
                voxels: generate_subject(&a, 5, 0.1, 4, &mut rng(20 + i)).unwrap(),
            })
            .collect();
        let spec = DatasetSpec { n_train: 10, n_test: 4, repeats_test: 3, run_length: 7, image_height: 16, image_width: 16, ..Default::default() };
        let ds = generate_dataset(&spec, subjects, &bb, &mut rng(2)).unwrap();
        let m = &ds.manifest;
        let t0: std::collections::BTreeSet<_> = m.subjects[0].train.iter().collect();
        let t1: std::collections::BTreeSet<_> = m.subjects[1].train.iter().collect();
        assert_eq!(t0.len() + t1.len(), 20);
        assert!(t0.is_disjoint(&t1));
        for sub in &m.subjects {
            for &t in &sub.test {
                assert_eq!(sub.trials.iter().filter(|&&x| x == t).count(), 3);
            }
        }
        m.validate().unwrap();

        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(&back, m);
        back.validate_files(dir.path()).unwrap();
    }

    #[test]
    fn run_ranges_partition() {
        assert_eq!(run_ranges(10, 4), vec![[0, 4], [4, 8], [8, 10]]);
        assert_eq!(run_ranges(9, 4), vec![[0, 4], [4, 9]]);
        assert_eq!(run_ranges(3, 50), vec![[0, 3]]);
    }
}

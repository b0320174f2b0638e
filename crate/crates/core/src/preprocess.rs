//! Response matrices and their preprocessing: per-run z-scoring and
//! SNR-based voxel selection.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::format::{self, ByteReader, ByteWriter, FORMAT_VERSION, RESPONSE_MAGIC};
use crate::scalar::Scalar;

/// `trials × voxels` responses with the trial → stimulus and trial → run maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix<T> {
    pub trials: usize,
    pub voxels: usize,
    pub data: Vec<T>,
    pub stimulus: Vec<usize>,
    pub run: Vec<usize>,
}

impl<T: Scalar> ResponseMatrix<T> {
    pub fn new(
        trials: usize,
        voxels: usize,
        data: Vec<T>,
        stimulus: Vec<usize>,
        run: Vec<usize>,
    ) -> Result<Self> {
        ensure!(trials >= 1 && voxels >= 1, Dimension, "empty response matrix");
        ensure!(
            data.len() == trials * voxels,
            Dimension,
            "{} values for {}x{}",
            data.len(),
            trials,
            voxels
        );
        ensure!(
            stimulus.len() == trials && run.len() == trials,
            Dimension,
            "trial maps must have one entry per trial"
        );
        Ok(ResponseMatrix { trials, voxels, data, stimulus, run })
    }

    /// Builds the run map from half-open `[start, end)` ranges.
    pub fn run_map(runs: &[[usize; 2]], trials: usize) -> Vec<usize> {
        let mut map = vec![0; trials];
        for (r, range) in runs.iter().enumerate() {
            for m in &mut map[range[0]..range[1].min(trials)] {
                *m = r;
            }
        }
        map
    }

    pub fn row(&self, trial: usize) -> &[T] {
        &self.data[trial * self.voxels..(trial + 1) * self.voxels]
    }

    pub fn get(&self, trial: usize, voxel: usize) -> T {
        self.data[trial * self.voxels + voxel]
    }

    /// Trials grouped by stimulus, in trial order.
    pub fn trials_by_stimulus(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (t, &s) in self.stimulus.iter().enumerate() {
            m.entry(s).or_default().push(t);
        }
        m
    }

    /// Repeat-averaged response for each listed stimulus, `stimuli.len() × voxels`.
    pub fn average_repeats(&self, stimuli: &[usize]) -> Result<Vec<Vec<T>>> {
        let groups = self.trials_by_stimulus();
        stimuli
            .iter()
            .map(|s| {
                let trials = groups
                    .get(s)
                    .ok_or_else(|| Error::Lookup(format!("stimulus {s} never shown")))?;
                let mut acc = vec![T::zero(); self.voxels];
                for &t in trials {
                    for (a, &x) in acc.iter_mut().zip(self.row(t)) {
                        *a = *a + x;
                    }
                }
                let n = T::lit(trials.len() as f64);
                Ok(acc.into_iter().map(|a| a / n).collect())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(RESPONSE_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.trials as u32);
        w.u32(self.voxels as u32);
        w.f32s(&self.data);
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes())
    }

    /// Reads a `UBER` file; the trial maps come from the manifest.
    pub fn load(path: &Path, stimulus: Vec<usize>, run: Vec<usize>) -> Result<Self> {
        let bytes = format::read_file(path)?;
        let mut r = ByteReader::new(&bytes, "response file");
        let header = ResponseHeader::parse(&mut r)?;
        let n = format::checked_count(&[header.trials as u32, header.voxels as u32], "response file")?;
        let data = r.f32s(n)?;
        Self::new(header.trials, header.voxels, data, stimulus, run)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseHeader {
    pub trials: usize,
    pub voxels: usize,
}

impl ResponseHeader {
    fn parse(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(RESPONSE_MAGIC)?;
        r.version()?;
        let trials = r.u32()? as usize;
        let voxels = r.u32()? as usize;
        Ok(ResponseHeader { trials, voxels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = format::read_file(path)?;
        Self::parse(&mut ByteReader::new(&bytes, "response file"))
    }
}

/// Standardizes every (voxel, run) slice; returns the matrix and the number
/// of constant slices that were mapped to zero.
pub fn zscore_per_run_counted<T: Scalar>(m: &ResponseMatrix<T>) -> Result<(ResponseMatrix<T>, usize)> {
    let mut runs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (t, &r) in m.run.iter().enumerate() {
        runs.entry(r).or_default().push(t);
    }
    for (r, trials) in &runs {
        ensure!(trials.len() >= 2, Config, "run {} has {} trial(s); need at least 2", r, trials.len());
    }
    let mut out = m.clone();
    let mut constant = 0;
    for trials in runs.values() {
        let n = T::lit(trials.len() as f64);
        for v in 0..m.voxels {
            let mean = trials.iter().fold(T::zero(), |a, &t| a + m.get(t, v)) / n;
            let var = trials.iter().fold(T::zero(), |a, &t| {
                let d = m.get(t, v) - mean;
                a + d * d
            }) / n;
            let sd = var.sqrt();
            let first = m.get(trials[0], v);
            let is_constant = trials.iter().all(|&t| m.get(t, v) == first);
            if is_constant || sd == T::zero() {
                constant += 1;
                for &t in trials {
                    out.data[t * m.voxels + v] = T::zero();
                }
            } else {
                for &t in trials {
                    out.data[t * m.voxels + v] = (m.get(t, v) - mean) / sd;
                }
            }
        }
    }
    if constant > 0 {
        log::warn!("z-scoring: {constant} constant (voxel, run) slice(s) set to zero");
    }
    Ok((out, constant))
}

/// Per-run z-scoring with population standard deviation.
pub fn zscore_per_run<T: Scalar>(m: &ResponseMatrix<T>) -> Result<ResponseMatrix<T>> {
    zscore_per_run_counted(m).map(|(z, _)| z)
}

/// Variance across stimuli of repeat-averaged responses over the mean
/// within-stimulus variance, per voxel. Only stimuli shown at least twice
/// contribute. A voxel with zero within-stimulus variance and nonzero
/// between-stimulus variance gets `f64::INFINITY`.
pub fn compute_snr<T: Scalar>(m: &ResponseMatrix<T>) -> Result<Vec<f64>> {
    let groups: Vec<Vec<usize>> = m
        .trials_by_stimulus()
        .into_values()
        .filter(|t| t.len() >= 2)
        .collect();
    ensure!(!groups.is_empty(), Config, "SNR needs stimuli with at least 2 repeats");
    let mut snr = Vec::with_capacity(m.voxels);
    for v in 0..m.voxels {
        let mut means = Vec::with_capacity(groups.len());
        let mut within = 0.0;
        for trials in &groups {
            let xs: Vec<f64> = trials.iter().map(|&t| m.get(t, v).to_f64_lossy()).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let identical = xs.iter().all(|&x| x == xs[0]);
            if !identical {
                within += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            }
            means.push(mean);
        }
        within /= groups.len() as f64;
        let between = if means.len() >= 2 {
            let mm = means.iter().sum::<f64>() / means.len() as f64;
            means.iter().map(|x| (x - mm).powi(2)).sum::<f64>() / (means.len() - 1) as f64
        } else {
            0.0
        };
        snr.push(if within > 0.0 {
            between / within
        } else if between > 0.0 {
            f64::INFINITY
        } else {
            0.0
        });
    }
    Ok(snr)
}

/// Indices of the `k` highest-SNR voxels, descending, ties to the lower index.
pub fn select_top_voxels(snr: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(k <= snr.len(), Config, "cannot select {} of {} voxels", k, snr.len());
    let mut idx: Vec<usize> = (0..snr.len()).collect();
    idx.sort_by(|&a, &b| {
        snr[b]
            .partial_cmp(&snr[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Keeps only the listed voxel columns.
pub fn select_columns<T: Scalar>(m: &ResponseMatrix<T>, voxels: &[usize]) -> Result<ResponseMatrix<T>> {
    ensure!(voxels.iter().all(|&v| v < m.voxels), Lookup, "voxel index out of range");
    let mut data = Vec::with_capacity(m.trials * voxels.len());
    for t in 0..m.trials {
        let row = m.row(t);
        data.extend(voxels.iter().map(|&v| row[v]));
    }
    ResponseMatrix::new(m.trials, voxels.len(), data, m.stimulus.clone(), m.run.clone())
}

//! Correlation-based metrics: Pearson, noise ceiling, encoding accuracy,
//! RSM and RSA.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const CEILING_FLOOR: f64 = 1e-3;
pub const CEILING_SPLITS: usize = 20;
pub const ACCURACY_CAP: f64 = 1.5;

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), Dimension, "pearson: lengths {} and {}", a.len(), b.len());
    ensure!(a.len() >= 2, Config, "pearson needs at least two points");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-voxel correlations; `None` marks a degenerate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelCorrelations {
    pub r: Vec<Option<f64>>,
    pub degenerate: usize,
}

impl VoxelCorrelations {
    pub fn valid(&self) -> Vec<f64> {
        self.r.iter().flatten().copied().collect()
    }

    pub fn median(&self) -> f64 {
        percentile(&self.valid(), 50.0)
    }
}

fn column(m: &[Vec<f64>], j: usize) -> Vec<f64> {
    m.iter().map(|row| row[j]).collect()
}

/// Column-wise Pearson between `pred` and `meas`, both `S × V`.
pub fn voxelwise_correlation(pred: &[Vec<f64>], meas: &[Vec<f64>]) -> Result<VoxelCorrelations> {
    ensure!(pred.len() == meas.len(), Dimension, "{} vs {} stimuli", pred.len(), meas.len());
    ensure!(pred.len() >= 2, Config, "need at least two stimuli");
    let v = pred[0].len();
    ensure!(
        pred.iter().chain(meas).all(|r| r.len() == v),
        Dimension,
        "rows must all have {v} voxels"
    );
    let mut r = Vec::with_capacity(v);
    let mut degenerate = 0;
    for j in 0..v {
        match pearson(&column(pred, j), &column(meas, j)) {
            Ok(x) => r.push(Some(x)),
            Err(Error::Degenerate(_)) => {
                degenerate += 1;
                r.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if degenerate > 0 {
        log::warn!("{degenerate} of {v} voxels have zero variance and are excluded");
    }
    Ok(VoxelCorrelations { r, degenerate })
}

/// Linearly interpolated percentile (`q` in 0..=100); NaN when empty.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

pub fn mse(pred: &[Vec<f64>], meas: &[Vec<f64>]) -> Result<f64> {
    ensure!(pred.len() == meas.len() && !pred.is_empty(), Dimension, "shape mismatch");
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, m) in pred.iter().zip(meas) {
        ensure!(p.len() == m.len(), Dimension, "row length mismatch");
        total += p.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        n += p.len();
    }
    Ok(total / n as f64)
}

fn mean_rows(rows: &[&Vec<f64>], v: usize) -> Vec<f64> {
    let mut acc = vec![0.0; v];
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r.iter()) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

/// Split-half noise ceiling per voxel. `repeats[s]` holds every repeat of
/// stimulus `s` (`repeats × V`). Each split shuffles the repeats of every
/// stimulus, averages the two halves, correlates across stimuli and applies
/// the Spearman–Brown correction; the corrected value (negative taken as 0)
/// is squared. Splits are averaged and the result clamped to `[1e-3, 1]`.
pub fn noise_ceiling(repeats: &[Vec<Vec<f64>>], seed: u64) -> Result<Vec<f64>> {
    ensure!(repeats.len() >= 2, Config, "noise ceiling needs at least two stimuli");
    ensure!(repeats.iter().all(|r| r.len() >= 2), Config, "noise ceiling needs >= 2 repeats per stimulus");
    let v = repeats[0][0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; v];
    for _ in 0..CEILING_SPLITS {
        let mut a = Vec::with_capacity(repeats.len());
        let mut b = Vec::with_capacity(repeats.len());
        for reps in repeats {
            let mut idx: Vec<usize> = (0..reps.len()).collect();
            idx.shuffle(&mut rng);
            let half = reps.len() / 2;
            let first: Vec<&Vec<f64>> = idx[..half].iter().map(|&i| &reps[i]).collect();
            let second: Vec<&Vec<f64>> = idx[half..].iter().map(|&i| &reps[i]).collect();
            a.push(mean_rows(&first, v));
            b.push(mean_rows(&second, v));
        }
        for (j, slot) in acc.iter_mut().enumerate() {
            let r = pearson(&column(&a, j), &column(&b, j)).unwrap_or(0.0);
            let sb = 2.0 * r / (1.0 + r);
            *slot += if sb > 0.0 { sb * sb } else { 0.0 };
        }
    }
    Ok(acc.into_iter().map(|x| (x / CEILING_SPLITS as f64).clamp(CEILING_FLOOR, 1.0)).collect())
}

/// `r² / ceiling`, clamped to `[0, 1.5]`; also returns how many were clamped.
pub fn encoding_accuracy(r: &[f64], ceiling: &[f64]) -> Result<(Vec<f64>, usize)> {
    ensure!(r.len() == ceiling.len(), Dimension, "{} correlations vs {} ceilings", r.len(), ceiling.len());
    let mut clamped = 0;
    let out = r
        .iter()
        .zip(ceiling)
        .map(|(&r, &c)| {
            let x = r * r / c;
            if !(0.0..=ACCURACY_CAP).contains(&x) {
                clamped += 1;
            }
            x.clamp(0.0, ACCURACY_CAP)
        })
        .collect();
    Ok((out, clamped))
}

/// Stimulus-by-stimulus similarity of response patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct Rsm {
    pub matrix: Vec<Vec<f64>>,
    /// Rows with zero variance; their off-diagonal entries are NaN.
    pub degenerate: Vec<usize>,
}

pub fn rsm(responses: &[Vec<f64>]) -> Result<Rsm> {
    let s = responses.len();
    ensure!(s >= 2, Config, "RSM needs at least two stimuli");
    ensure!(responses[0].len() >= 2, Config, "RSM needs at least two voxels");
    let mut m = vec![vec![f64::NAN; s]; s];
    let mut degenerate = Vec::new();
    for i in 0..s {
        m[i][i] = 1.0;
        for j in 0..i {
            match pearson(&responses[i], &responses[j]) {
                Ok(r) => {
                    m[i][j] = r;
                    m[j][i] = r;
                }
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    for (i, row) in responses.iter().enumerate() {
        let first = row[0];
        if row.iter().all(|&x| x == first) {
            degenerate.push(i);
        }
    }
    Ok(Rsm { matrix: m, degenerate })
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Spearman correlation of the strict upper triangles; pairs with a NaN on
/// either side are skipped.
pub fn rsa_compare(a: &Rsm, b: &Rsm) -> Result<f64> {
    let s = a.matrix.len();
    ensure!(b.matrix.len() == s, Dimension, "RSMs of size {} and {}", s, b.matrix.len());
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..s {
        for j in i + 1..s {
            let (x, y) = (a.matrix[i][j], b.matrix[i][j]);
            if x.is_finite() && y.is_finite() {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    ensure!(xs.len() >= 2, Degenerate, "fewer than two comparable entries");
    spearman(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&a, &[1.0; 4]), Err(Error::Degenerate(_))));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn pearson_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let t: Vec<f64> = a.iter().map(|x| 3.0 * x - 7.0).collect();
        assert!((pearson(&a, &b).unwrap() - pearson(&t, &b).unwrap()).abs() < 1e-12);
        assert!((pearson(&a, &b).unwrap() - pearson(&b, &a).unwrap()).abs() < 1e-15);
    }

    fn random(s: usize, v: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..s).map(|_| (0..v).map(|_| n.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn voxelwise_cases() {
        let p = random(20, 5, 1);
        let c = voxelwise_correlation(&p, &p).unwrap();
        assert!(c.valid().iter().all(|r| (r - 1.0).abs() < 1e-12));
        let m = random(20, 5, 2);
        let c = voxelwise_correlation(&p, &m).unwrap();
        for j in 0..5 {
            let want = pearson(&column(&p, j), &column(&m, j)).unwrap();
            assert_eq!(c.r[j], Some(want));
        }
        let mut flat = m.clone();
        flat.iter_mut().for_each(|r| r[2] = 1.0);
        let c = voxelwise_correlation(&p, &flat).unwrap();
        assert_eq!((c.degenerate, c.r[2]), (1, None));
    }

    #[test]
    fn independent_columns_have_small_median() {
        let c = voxelwise_correlation(&random(1000, 200, 3), &random(1000, 200, 4)).unwrap();
        let abs: Vec<f64> = c.valid().iter().map(|r| r.abs()).collect();
        assert!(percentile(&abs, 50.0) < 0.07);
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&xs, 50.0), 2.5);
        assert_eq!(percentile(&xs, 25.0), 1.75);
        assert_eq!(percentile(&xs, 100.0), 4.0);
    }

    #[test]
    fn noise_ceiling_cases() {
        let base = random(30, 4, 5);
        let noiseless: Vec<Vec<Vec<f64>>> = base.iter().map(|r| vec![r.clone(); 3]).collect();
        for c in noise_ceiling(&noiseless, 0).unwrap() {
            assert!((c - 1.0).abs() < 1e-12);
        }
        let noise: Vec<Vec<Vec<f64>>> = (0..200).map(|s| random(4, 50, 100 + s)).collect();
        let c = noise_ceiling(&noise, 0).unwrap();
        assert!(percentile(&c, 50.0) < 0.02, "{}", percentile(&c, 50.0));
        assert!(c.iter().all(|&x| x >= CEILING_FLOOR));
        assert_eq!(noise_ceiling(&noise, 7).unwrap(), noise_ceiling(&noise, 7).unwrap());
        let single: Vec<Vec<Vec<f64>>> = base.iter().map(|r| vec![r.clone()]).collect();
        assert!(matches!(noise_ceiling(&single, 0), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_cases() {
        let (a, n) = encoding_accuracy(&[1.0, 0.0, 0.6], &[1.0, 1.0, 0.5]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-15 && a[1] == 0.0 && (a[2] - 0.72).abs() < 1e-12);
        assert_eq!(n, 0);
        let (a, n) = encoding_accuracy(&[0.9], &[0.1]).unwrap();
        assert_eq!((a[0], n), (1.5, 1));
        let r = [0.3, -0.5, 0.8];
        let (a, _) = encoding_accuracy(&r, &[1.0; 3]).unwrap();
        for (x, y) in a.iter().zip(r) {
            assert_eq!(*x, y * y);
        }
    }

    #[test]
    fn rsm_cases() {
        let same = vec![vec![1.0, 2.0, 4.0]; 3];
        let m = rsm(&same).unwrap();
        assert!(m.matrix.iter().flatten().all(|&x| (x - 1.0).abs() < 1e-12));

        // centred, mutually orthogonal rows
        let rows = vec![vec![1.0, -1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]];
        let m = rsm(&rows).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m.matrix[i][j] - want).abs() < 1e-12);
            }
        }

        let r = random(8, 6, 9);
        let m = rsm(&r).unwrap();
        let scaled: Vec<Vec<f64>> = r.iter().enumerate().map(|(i, row)| row.iter().map(|x| (i + 1) as f64 * x + 2.0).collect()).collect();
        let m2 = rsm(&scaled).unwrap();
        for i in 0..8 {
            assert_eq!(m.matrix[i][i], 1.0);
            for j in 0..8 {
                assert_eq!(m.matrix[i][j], m.matrix[j][i]);
                assert!((m.matrix[i][j] - m2.matrix[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn rsa_cases() {
        let a = rsm(&random(10, 6, 11)).unwrap();
        assert!((rsa_compare(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    neg.matrix[i][j] = -neg.matrix[i][j];
                }
            }
        }
        assert!((rsa_compare(&a, &neg).unwrap() + 1.0).abs() < 1e-12);

        // rank-then-pearson oracle over the upper triangle
        let b = rsm(&random(10, 6, 12)).unwrap();
        let (mut xs, mut ys) = (vec![], vec![]);
        for i in 0..10 {
            for j in i + 1..10 {
                xs.push(a.matrix[i][j]);
                ys.push(b.matrix[i][j]);
            }
        }
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter().map(|x| 1.0 + v.iter().filter(|y| *y < x).count() as f64 + 0.5 * (v.iter().filter(|y| *y == x).count() - 1) as f64).collect()
        };
        let want = pearson(&rank(&xs), &rank(&ys)).unwrap();
        assert!((rsa_compare(&a, &b).unwrap() - want).abs() < 1e-12);

        let flat = Rsm { matrix: vec![vec![0.5; 4]; 4], degenerate: vec![] };
        assert!(matches!(rsa_compare(&flat, &flat), Err(Error::Degenerate(_))));
    }
}

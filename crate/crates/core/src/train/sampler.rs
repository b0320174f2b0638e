//! Image and voxel sampling over the pooled training set.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::train::data::TrainingData;

/// One training image with the voxels scored on it.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem<T> {
    /// Index into [`TrainingData::subjects`].
    pub subject: usize,
    /// Index into that subject's training examples.
    pub example: usize,
    /// Index into the stimulus pool.
    pub stimulus: usize,
    pub voxels: Vec<usize>,
    pub target: Vec<T>,
}

/// `min(k, v)` distinct voxel indices, uniform without replacement. When every
/// voxel is taken they come back in index order.
pub fn sample_voxels(v: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if k >= v {
        (0..v).collect()
    } else {
        index::sample(rng, v, k).into_vec()
    }
}

pub fn make_item<T: Scalar>(
    data: &TrainingData<T>,
    (subject, example): (usize, usize),
    voxels_per_image: usize,
    rng: &mut impl Rng,
) -> BatchItem<T> {
    let s = &data.subjects[subject];
    let voxels = sample_voxels(s.voxel_count, voxels_per_image, rng);
    let row = &s.train_targets[example];
    BatchItem {
        subject,
        example,
        stimulus: s.train[example],
        target: voxels.iter().map(|&v| row[v]).collect(),
        voxels,
    }
}

/// `batch_images` images drawn uniformly, with replacement, from the union of
/// all subjects' training sets.
pub fn sample_batch<T: Scalar>(
    data: &TrainingData<T>,
    batch_images: usize,
    voxels_per_image: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BatchItem<T>>> {
    let pairs = data.training_pairs();
    ensure!(!pairs.is_empty(), Config, "no training examples");
    ensure!(batch_images >= 1, Config, "batch_images must be >= 1");
    Ok((0..batch_images)
        .map(|_| {
            let p = pairs[rng.gen_range(0..pairs.len())];
            make_item(data, p, voxels_per_image, rng)
        })
        .collect())
}

/// One epoch: every pooled training pair once, shuffled, cut into batches.
pub fn epoch_batches<T: Scalar>(data: &TrainingData<T>, batch_images: usize, rng: &mut impl Rng) -> Vec<Vec<(usize, usize)>> {
    let mut pairs = data.training_pairs();
    pairs.shuffle(rng);
    pairs.chunks(batch_images.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeatureTensor;
    use crate::train::data::SubjectData;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(sizes: &[(usize, usize)]) -> TrainingData<f64> {
        let mut d = TrainingData::default();
        let mut next = 0;
        for (i, &(n, v)) in sizes.iter().enumerate() {
            d.subjects.push(SubjectData {
                subject_id: format!("s{i}"),
                dataset_id: "d".into(),
                voxel_count: v,
                train: (next..next + n).collect(),
                train_targets: (0..n).map(|j| (0..v).map(|k| (j * v + k) as f64).collect()).collect(),
                test: vec![],
                test_targets: vec![],
                test_repeats: vec![],
            });
            next += n;
        }
        d.raw = (0..next).map(|_| FeatureTensor::new(1, 1, 1, vec![0.0]).unwrap()).collect();
        d
    }

    #[test]
    fn voxel_count_is_clamped() {
        let d = data(&[(3, 10)]);
        let b = sample_batch(&d, 4, 5000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for item in b {
            assert_eq!(item.voxels, (0..10).collect::<Vec<_>>());
            assert_eq!(item.target, d.subjects[0].train_targets[item.example]);
        }
    }

    #[test]
    fn voxels_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = sample_voxels(100, 40, &mut rng);
        assert_eq!(v.len(), 40);
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 40);
    }

    #[test]
    fn deterministic_and_empty_rejected() {
        let d = data(&[(5, 7), (4, 3)]);
        let a = sample_batch(&d, 32, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&d, 32, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let empty = data(&[(0, 3)]);
        assert!(matches!(
            sample_batch(&empty, 32, 4, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn draw_frequency_follows_pool_size() {
        let d = data(&[(9000, 2), (9000, 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut first = 0usize;
        let draws = 100_000;
        for _ in 0..draws / 100 {
            for item in sample_batch(&d, 100, 1, &mut rng).unwrap() {
                first += (item.subject == 0) as usize;
            }
        }
        let frac = first as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn epoch_covers_every_pair_once() {
        let d = data(&[(5, 1), (6, 1)]);
        let batches = epoch_batches(&d, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(batches.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 4, 3]);
        let mut all: Vec<_> = batches.concat();
        all.sort();
        assert_eq!(all, d.training_pairs());
    }
}

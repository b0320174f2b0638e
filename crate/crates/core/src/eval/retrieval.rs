//! Identify a stimulus from its measured response among distractors.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::metrics::pearson;

pub const DEFAULT_RESAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub queries: usize,
    /// Queries skipped because their measured response was constant.
    pub excluded: usize,
}

/// 0-based rank of candidate `truth` among `candidates` by descending
/// score; equal scores are ordered by candidate index.
pub fn rank_of(scores: &[f64], candidates: &[usize], truth: usize) -> usize {
    let pos = candidates.iter().position(|&c| c == truth).expect("truth among candidates");
    let s = scores[pos];
    candidates
        .iter()
        .zip(scores)
        .filter(|&(&c, &x)| x > s || (x == s && c < truth))
        .count()
}

/// Query `i` is the measured response to stimulus `i`; `predicted[i]` is the
/// model's prediction for the same stimulus. Each query is ranked against
/// `n − 1` distractors drawn from the other stimuli, `resamples` times.
pub fn retrieval_test(
    queries: &[Vec<f64>],
    predicted: &[Vec<f64>],
    n: usize,
    resamples: usize,
    seed: u64,
) -> Result<RetrievalResult> {
    let pool = predicted.len();
    ensure!(queries.len() == pool, Dimension, "{} queries for {} candidates", queries.len(), pool);
    ensure!(n >= 2, Config, "retrieval needs N >= 2");
    ensure!(n <= pool, Config, "N = {n} exceeds the {pool} available stimuli");
    ensure!(resamples >= 1, Config, "resamples must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits1, mut hits5, mut trials, mut excluded) = (0usize, 0usize, 0usize, 0usize);
    for (q, query) in queries.iter().enumerate() {
        let scores_all: Vec<Option<f64>> = predicted
            .iter()
            .map(|p| match pearson(p, query) {
                Ok(r) => Ok(Some(r)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        if query.iter().all(|&x| x == query[0]) {
            excluded += 1;
            continue;
        }
        for _ in 0..resamples {
            let mut cands = vec![q];
            cands.extend(index::sample(&mut rng, pool - 1, n - 1).into_iter().map(|i| if i >= q { i + 1 } else { i }));
            let scores: Vec<f64> = cands.iter().map(|&c| scores_all[c].unwrap_or(f64::NEG_INFINITY)).collect();
            let rank = rank_of(&scores, &cands, q);
            hits1 += (rank == 0) as usize;
            hits5 += (rank < 5) as usize;
            trials += 1;
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} retrieval queries are constant and were skipped");
    }
    ensure!(trials > 0, Degenerate, "every retrieval query is constant");
    Ok(RetrievalResult {
        n,
        top1: hits1 as f64 / trials as f64,
        top5: hits5 as f64 / trials as f64,
        queries: queries.len() - excluded,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random(s: usize, v: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..s).map(|_| (0..v).map(|_| n.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn perfect_predictions_are_always_found() {
        let m = random(30, 20, 0);
        let r = retrieval_test(&m, &m, 30, 3, 1).unwrap();
        assert_eq!((r.top1, r.top5), (1.0, 1.0));
    }

    #[test]
    fn two_way_chance_is_half() {
        let r = retrieval_test(&random(1000, 10, 2), &random(1000, 10, 3), 2, 1, 4).unwrap();
        assert!((r.top1 - 0.5).abs() < 0.05, "{}", r.top1);
        assert_eq!(r.top5, 1.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], &[4, 2, 7], 4), 1);
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], &[2, 4, 7], 2), 0);
    }

    #[test]
    fn ranking_ignores_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cands: Vec<usize> = (0..20).collect();
        let t: Vec<f64> = scores.iter().map(|x| (3.0 * x).exp()).collect();
        for truth in 0..20 {
            assert_eq!(rank_of(&scores, &cands, truth), rank_of(&t, &cands, truth));
        }
    }

    #[test]
    fn constant_queries_are_excluded() {
        let mut q = random(5, 4, 6);
        q[1] = vec![2.0; 4];
        let r = retrieval_test(&q, &q, 3, 2, 0).unwrap();
        assert_eq!((r.excluded, r.queries), (1, 4));
        assert!(matches!(retrieval_test(&q, &q, 9, 1, 0), Err(Error::Config(_))));
    }
}

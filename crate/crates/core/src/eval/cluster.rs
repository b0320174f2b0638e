//! k-means over voxel embeddings, cluster reports and agreement scores.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::metrics::{pearson, rsa_compare, rsm};

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids. Returns the fit and the
/// inertia after every assignment step.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> (KMeans, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            inertia += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed from the point farthest from its centroid
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]]).total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    })
                    .unwrap();
                centroids[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    (KMeans { labels, centroids, inertia }, history)
}

/// k-means++ seeding, Lloyd iterations, best of 10 restarts by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    ensure!(k >= 1, Config, "k must be >= 1");
    ensure!(points.len() >= k, Config, "{} points for k = {k}", points.len());
    let dim = points[0].len();
    ensure!(points.iter().all(|p| p.len() == dim), Dimension, "points differ in dimension");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus(points, k, &mut rng);
        let (fit, _) = lloyd(points, init, KMEANS_MAX_ITER);
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    ensure!(a.len() == b.len(), Dimension, "label vectors of length {} and {}", a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sb: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTop {
    pub cluster: usize,
    pub size: usize,
    /// `(stimulus id, mean activation)`, descending.
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub labels: Vec<usize>,
    pub clusters: Vec<ClusterTop>,
    pub ari: Option<f64>,
    pub subject_ari: Option<f64>,
}

/// For every cluster: mean activation per stimulus over member voxels and
/// the `top_n` highest stimuli (ties by stimulus order). `responses` is
/// `S × V` with columns matching `labels`.
pub fn cluster_top_images(
    labels: &[usize],
    k: usize,
    responses: &[Vec<f64>],
    stimulus_ids: &[String],
    top_n: usize,
) -> Result<ClusterReport> {
    ensure!(stimulus_ids.len() == responses.len(), Dimension, "{} ids for {} stimuli", stimulus_ids.len(), responses.len());
    ensure!(responses.iter().all(|r| r.len() == labels.len()), Dimension, "response columns must match labels");
    ensure!(labels.iter().all(|&l| l < k), Config, "label out of range for k = {k}");
    let mut clusters = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let mut means: Vec<(usize, f64)> = if members.is_empty() {
            Vec::new()
        } else {
            responses
                .iter()
                .enumerate()
                .map(|(s, row)| (s, members.iter().map(|&i| row[i]).sum::<f64>() / members.len() as f64))
                .collect()
        };
        means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        clusters.push(ClusterTop {
            cluster: c,
            size: members.len(),
            top: means.into_iter().take(top_n).map(|(s, m)| (stimulus_ids[s].clone(), m)).collect(),
        });
    }
    Ok(ClusterReport { k, labels: labels.to_vec(), clusters, ari: None, subject_ari: None })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    }
}

/// Mean over `a` of the best cosine to any member of `b`, averaged with the
/// reverse direction.
pub fn nearest_neighbor_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let one = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter().map(|p| y.iter().map(|q| cosine(p, q)).fold(f64::MIN, f64::max)).sum::<f64>() / x.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

/// A labelled voxel group: embeddings (`n × E`) and responses (`S × n`).
#[derive(Debug, Clone)]
pub struct VoxelGroup {
    pub label: String,
    pub embeddings: Vec<Vec<f64>>,
    pub responses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub a: String,
    pub b: String,
    pub embedding_similarity: f64,
    pub rsa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<AlignmentPair>,
    /// Pearson across pairs; `None` when either measure is constant.
    pub correlation: Option<f64>,
    pub excluded_groups: Vec<String>,
}

/// Per pair of groups: nearest-neighbour embedding cosine and RSA between
/// the groups' RSMs; returns their correlation across pairs.
pub fn embedding_rsa_alignment(groups: &[VoxelGroup]) -> Result<Alignment> {
    let (kept, dropped): (Vec<&VoxelGroup>, Vec<&VoxelGroup>) = groups.iter().partition(|g| g.embeddings.len() >= 2);
    ensure!(kept.len() >= 3, Config, "need at least three groups with two or more voxels");
    let rsms = kept.iter().map(|g| rsm(&g.responses)).collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            pairs.push(AlignmentPair {
                a: kept[i].label.clone(),
                b: kept[j].label.clone(),
                embedding_similarity: nearest_neighbor_cosine(&kept[i].embeddings, &kept[j].embeddings),
                rsa: rsa_compare(&rsms[i], &rsms[j])?,
            });
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.embedding_similarity).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.rsa).collect();
    let correlation = match pearson(&xs, &ys) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Alignment { pairs, correlation, excluded_groups: dropped.iter().map(|g| g.label.clone()).collect() })
}

//! Label-agreement of the pooled embedding cloud: k-means with V-measure, and
//! leave-one-out k-nearest-neighbour accuracy under cosine distance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, normalize_rows, sq_dist, Matrix, MultimodalBatch, Rng};

/// All modalities stacked into one point set (modality 0 first), with each
/// sample's label repeated once per modality.
#[derive(Debug, Clone)]
pub struct PooledCloud {
    pub points: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl PooledCloud {
    pub fn from_batch(batch: &MultimodalBatch) -> Self {
        let mut data = Vec::with_capacity(batch.num_modalities() * batch.num_samples() * batch.dim());
        for z in batch.modalities() {
            data.extend_from_slice(z.data());
        }
        let rows = batch.num_modalities() * batch.num_samples();
        let points = Matrix::new(rows, batch.dim(), data).expect("stacked shape");
        let labels = batch.labels().map(|l| {
            let mut out = Vec::with_capacity(rows);
            for _ in 0..batch.num_modalities() {
                out.extend_from_slice(l);
            }
            out
        });
        PooledCloud { points, labels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.below(n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &Matrix, mut centroids: Matrix, max_iter: usize, tol: f64) -> KMeansResult {
    let (n, d) = points.shape();
    let k = centroids.rows();
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centroids);
            assign[i] = c;
            dist[i] = dd;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster with the worst-fitting point
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(j) if dist[j] >= dist[i] => Some(j),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    let old = assign[i];
                    counts[old] -= 1;
                    for (s, v) in sums.row_mut(old).iter_mut().zip(points.row(i)) {
                        *s -= v;
                    }
                    assign[i] = c;
                    dist[i] = 0.0;
                    counts[c] = 1;
                    sums.row_mut(c).copy_from_slice(points.row(i));
                }
            }
        }
        let mut shift: f64 = 0.0;
        for (c, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if shift <= tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, p) in assign.iter_mut().zip(points.iter_rows()) {
        let (c, dd) = nearest(p, &centroids);
        *a = c;
        inertia += dd;
    }
    KMeansResult {
        assignments: assign,
        centroids,
        inertia,
        iterations,
    }
}

/// Lloyd's algorithm from k-means++ seeds; the restart with the lowest
/// inertia wins (earliest restart on ties).
pub fn kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 || cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::InvalidConfig(
            "k, restarts and max_iter must be positive".into(),
        ));
    }
    if cfg.k > points.rows() {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds the {} points",
            cfg.k,
            points.rows()
        )));
    }
    let root = Rng::new(cfg.seed);
    let runs: Vec<KMeansResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = root.derive(r as u64);
            let init = seed_plus_plus(points, cfg.k, &mut rng);
            lloyd(points, init, cfg.max_iter, cfg.tol)
        })
        .collect();
    let mut best: Option<KMeansResult> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VMeasure {
    pub homogeneity: f64,
    pub completeness: f64,
    pub v_measure: f64,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity, completeness and their harmonic mean, in nats.
pub fn v_measure(truth: &[usize], pred: &[usize]) -> Result<VMeasure> {
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} assignments",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let n = truth.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&c, &k) in truth.iter().zip(pred) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_c = entropy(by_class.values().copied(), n);
    let h_k = entropy(by_cluster.values().copied(), n);
    let h_ck = entropy(joint.values().copied(), n);
    // H(C|K) = H(C,K) - H(K)
    let homogeneity = if h_c == 0.0 {
        1.0
    } else {
        (1.0 - (h_ck - h_k) / h_c).clamp(0.0, 1.0)
    };
    let completeness = if h_k == 0.0 {
        1.0
    } else {
        (1.0 - (h_ck - h_c) / h_k).clamp(0.0, 1.0)
    };
    let v_measure = if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    };
    Ok(VMeasure {
        homogeneity,
        completeness,
        v_measure,
    })
}

/// Leave-one-out majority vote over the `k` nearest points by cosine
/// distance. Neighbour ties go to the lower index; vote ties to the label
/// of the nearest tied neighbour.
pub fn knn_accuracy(points: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} points", labels.len())));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let k = k.min(n - 1);
    let u = normalize_rows(points)?;
    let correct: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = u.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (1.0 - dot(q, u.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            let mut votes: Vec<(usize, usize)> = Vec::new();
            for &(_, j) in &cand {
                match votes.iter_mut().find(|v| v.0 == labels[j]) {
                    Some(v) => v.1 += 1,
                    None => votes.push((labels[j], 1)),
                }
            }
            // votes are in order of first appearance, so max_by keeps the nearest on ties
            let top = votes.iter().fold(votes[0], |best, &v| if v.1 > best.1 { v } else { best });
            usize::from(top.0 == labels[i])
        })
        .sum();
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterEvalConfig {
    pub knn_k: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub seed: u64,
    /// Defaults to the number of distinct labels.
    pub num_clusters: Option<usize>,
}

impl Default for ClusterEvalConfig {
    fn default() -> Self {
        ClusterEvalConfig {
            knn_k: 10,
            kmeans_restarts: 10,
            kmeans_max_iter: 300,
            seed: 0,
            num_clusters: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterEval {
    pub v_measure: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub knn_accuracy: f64,
}

pub fn cluster_eval(batch: &MultimodalBatch, cfg: &ClusterEvalConfig) -> Result<ClusterEval> {
    let cloud = PooledCloud::from_batch(batch);
    let labels = cloud.labels.as_ref().ok_or(Error::LabelsMissing)?;
    let k = match cfg.num_clusters {
        Some(k) => k,
        None => {
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            distinct.len()
        }
    };
    let km = kmeans(
        &cloud.points,
        &KMeansConfig {
            k,
            restarts: cfg.kmeans_restarts,
            max_iter: cfg.kmeans_max_iter,
            tol: 1e-6,
            seed: cfg.seed,
        },
    )?;
    let v = v_measure(labels, &km.assignments)?;
    Ok(ClusterEval {
        v_measure: v.v_measure,
        homogeneity: v.homogeneity,
        completeness: v.completeness,
        knn_accuracy: knn_accuracy(&cloud.points, labels, cfg.knn_k)?,
    })
}

//! Unsupervised part segmentation from handle-perturbation responses.
//!
//! Each surface sample gets a descriptor recording how strongly its decoded
//! distance reacts when single handles are jittered. Samples are then grouped
//! by spectral clustering on a knn similarity graph of those descriptors.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array3;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::train::stream_seed;
use crate::autoencoder::{LatentCode, Model};
use crate::geometry::Point3;
use crate::{Error, Result};

const STAGE_PERTURB: u64 = 0x20;
const STAGE_KMEANS: u64 = 0x21;
const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub parts: usize,
    /// Shift repetitions per handle.
    pub repetitions: usize,
    /// Gaussian shift σ as a multiple of the smallest per-axis sample deviation.
    pub sigma_scale: f64,
    pub k_fraction: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { parts: 2, repetitions: 1024, sigma_scale: 0.25, k_fraction: 0.05, restarts: 20, seed: 0 }
    }
}

/// Smallest per-axis population standard deviation.
pub fn min_axis_std(points: &[Point3]) -> f64 {
    let n = points.len() as f64;
    (0..3)
        .map(|a| {
            let mean = points.iter().map(|p| p.component(a)).sum::<f64>() / n;
            (points.iter().map(|p| (p.component(a) - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Raw responses `|Δ sdf|` with shape `(samples, handles, repetitions)`.
pub fn perturb_and_measure(
    model: &Model,
    code: &LatentCode,
    samples: &[Point3],
    repetitions: usize,
    sigma_scale: f64,
    seed: u64,
) -> Result<Array3<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no surface samples to segment".into()));
    }
    let h = code.handles.len();
    let sigma = sigma_scale * min_axis_std(samples);
    let base = model.decode_code(code, samples)?;
    let mut raw = Array3::zeros((samples.len(), h, repetitions));
    for t in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STAGE_PERTURB, t, 0));
        for j in 0..h {
            let mut n3 = || -> f64 { StandardNormal.sample(&mut rng) };
            let shift = Point3::new(n3(), n3(), n3()) * sigma;
            let mut handles = code.handles.clone();
            handles[j] += shift;
            let d = model.decode(&handles, &code.style, samples)?;
            for (i, (a, b)) in d.iter().zip(&base).enumerate() {
                raw[[i, j, t]] = (a - b).abs();
            }
        }
    }
    Ok(raw)
}

/// Each handle's responses over all samples scaled to unit L1, then each
/// sample's full descriptor scaled to unit L1. Zero groups stay zero.
pub fn normalize_features(raw: &Array3<f64>) -> Array3<f64> {
    let mut f = raw.clone();
    let (n, h, _) = f.dim();
    for j in 0..h {
        let mut group = f.slice_mut(ndarray::s![.., j, ..]);
        let s: f64 = group.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            group.mapv_inplace(|v| v / s);
        }
    }
    for i in 0..n {
        let mut row = f.slice_mut(ndarray::s![i, .., ..]);
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    f
}

/// Descriptors flattened to one vector per sample.
pub fn flatten_features(f: &Array3<f64>) -> Vec<Vec<f64>> {
    f.outer_iter().map(|m| m.iter().copied().collect()).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `exp(-|fi - fj| / (|fi| |fj|))`, kept inside `(0, 1]`.
pub fn similarity(fi: &[f64], fj: &[f64]) -> f64 {
    let d = euclid(fi, fj);
    if d == 0.0 {
        return 1.0;
    }
    let denom = norm(fi) * norm(fj);
    (-(d / denom)).exp().max(f64::MIN_POSITIVE)
}

/// `k` nearest other samples of each sample; ties go to the lower index.
pub fn knn_indices(features: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = features.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (euclid(&features[i], &features[j]), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Symmetric weighted graph as sorted adjacency lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i].binary_search_by_key(&j, |e| e.0).map_or(0.0, |k| self.neighbors[i][k].1)
    }

    /// Graph from a symmetric weight matrix; zero entries are non-edges.
    pub fn from_dense(w: &DMatrix<f64>) -> Self {
        let neighbors = (0..w.nrows())
            .map(|i| (0..w.ncols()).filter(|&j| j != i && w[(i, j)] != 0.0).map(|j| (j, w[(i, j)])).collect())
            .collect();
        Self { neighbors }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut w = DMatrix::zeros(n, n);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &(j, v) in row {
                w[(i, j)] = v;
            }
        }
        w
    }
}

/// knn graph with `k = ceil(k_fraction * n)`, symmetrized by union.
pub fn build_similarity_graph(features: &[Vec<f64>], k_fraction: f64) -> Result<SimilarityGraph> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("similarity graph needs 2 samples, got {n}")));
    }
    let k = ((k_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut adj: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for (i, nb) in knn_indices(features, k).into_iter().enumerate() {
        for j in nb {
            let s = similarity(&features[i], &features[j]);
            adj[i].insert(j, s);
            adj[j].insert(i, s);
        }
    }
    Ok(SimilarityGraph { neighbors: adj.into_iter().map(|m| m.into_iter().collect()).collect() })
}

/// Row-normalized spectral embedding from the `k` smallest eigenvalues of the
/// symmetric normalized Laplacian.
pub fn spectral_embedding(graph: &SimilarityGraph, k: usize) -> Result<Vec<Vec<f64>>> {
    let n = graph.len();
    let w = graph.to_dense();
    let d: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = d.iter().map(|&x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 }).collect();
    // Largest eigenvalues of D^-1/2 W D^-1/2 are the smallest of the Laplacian.
    let a = DMatrix::from_fn(n, n, |i, j| w[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::EigensolverFailure(format!("no convergence on a {n}x{n} graph")))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigensolverFailure("non-finite eigenvalues".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            let r = norm(&row);
            if r > 0.0 {
                row.into_iter().map(|v| v / r).collect()
            } else {
                row
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest_center(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<usize> = points.iter().map(|p| nearest_center(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous center.
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

/// k-means++ with `restarts` seeded restarts; the lowest inertia wins.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {} points", points.len())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STAGE_KMEANS, r, 0));
        let (labels, inertia) = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    Ok(canonical_labels(&best.expect("at least one restart").0))
}

/// Renumbers labels in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

pub fn spectral_cluster(graph: &SimilarityGraph, k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = graph.len();
    if k == 0 {
        return Err(Error::InvalidArgument("zero parts requested".into()));
    }
    if k >= n {
        return Ok((0..n).collect());
    }
    kmeans(&spectral_embedding(graph, k)?, k, restarts, seed)
}

/// Accuracy under the best one-to-one mapping of predicted to true labels.
pub fn score_segmentation(labels: &[usize], truth: &[usize]) -> Result<f64> {
    if labels.len() != truth.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} ground-truth samples", labels.len(), truth.len())));
    }
    let lp = canonical_labels(labels);
    let lt = canonical_labels(truth);
    let m = lp.iter().chain(&lt).max().expect("non-empty") + 1;
    let mut counts = vec![0i64; m * m];
    for (&p, &t) in lp.iter().zip(&lt) {
        counts[p * m + t] += 1;
    }
    let weights = Matrix::from_vec(m, m, counts).expect("square count matrix");
    let (total, _) = kuhn_munkres(&weights);
    Ok(total as f64 / labels.len() as f64)
}

/// Full pipeline for one encoded shape.
pub fn segment(model: &Model, code: &LatentCode, samples: &[Point3], cfg: &SegmentationConfig) -> Result<Vec<usize>> {
    let raw = perturb_and_measure(model, code, samples, cfg.repetitions, cfg.sigma_scale, cfg.seed)?;
    let features = flatten_features(&normalize_features(&raw));
    let graph = build_similarity_graph(&features, cfg.k_fraction)?;
    spectral_cluster(&graph, cfg.parts, cfg.restarts, cfg.seed)
}

//! Coverage and minimum matching distance of generated shape variations
//! against a held-out reference group, both under mean Chamfer distance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::train::stream_seed;
use crate::autoencoder::{LatentCode, Model};
use crate::dataset::Dataset;
use crate::editing::{extract_mesh, reencode};
use crate::geometry::{chamfer_distance, normalize_for_eval, sample_mesh_surface, Point3};
use crate::{Error, Result};

const STAGE_SPLIT: u64 = 0x30;
const STAGE_VARIATION: u64 = 0x31;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub a: Vec<u64>,
    pub b: Vec<u64>,
}

impl EvalSplit {
    /// `A` gets `min(a_cap, floor(n / 4))` random ids (at least one), `B` the rest.
    pub fn new(ids: &[u64], a_cap: usize, seed: u64) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 shapes to split, got {}", ids.len())));
        }
        let mut order = ids.to_vec();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, STAGE_SPLIT, 0, 0)));
        let na = a_cap.min(ids.len() / 4).max(1);
        let mut a = order[..na].to_vec();
        let mut b = order[na..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        Ok(Self { a, b })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationConfig {
    pub iterations: usize,
    pub reencode_sample_count: usize,
    pub mesh_resolution: usize,
    pub mesh_level: f64,
    pub points: usize,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self { iterations: 4, reencode_sample_count: 2048, mesh_resolution: 64, mesh_level: 0.0, points: 4096 }
    }
}

/// Moves one random handle toward the donor's handle over `iterations`
/// projections with the style left free. Exactly `iterations` rounds run.
pub fn variation_latent(model: &Model, shape: &LatentCode, donor: &LatentCode, cfg: &VariationConfig, seed: u64) -> Result<LatentCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STAGE_VARIATION, 0, 0));
    let j = rng.random_range(0..shape.handles.len());
    let target = donor.handles[j];
    let mut current = shape.clone();
    for r in 1..=cfg.iterations {
        let remaining = (cfg.iterations + 1 - r) as f64;
        let step = (target - current.handles[j]) * (1.0 / remaining);
        current.handles[j] += step;
        current = reencode(&current, model, cfg.reencode_sample_count, rng.random())?;
    }
    Ok(current)
}

/// Variation as a normalized surface point cloud.
pub fn generate_variation(model: &Model, shape: &LatentCode, donor: &LatentCode, cfg: &VariationConfig, seed: u64) -> Result<Vec<Point3>> {
    let code = variation_latent(model, shape, donor, cfg, seed)?;
    latent_point_cloud(model, &code, cfg, seed)
}

pub fn latent_point_cloud(model: &Model, code: &LatentCode, cfg: &VariationConfig, seed: u64) -> Result<Vec<Point3>> {
    let mesh = extract_mesh(model, code, cfg.mesh_resolution, cfg.mesh_level)?;
    let pts = sample_mesh_surface(&mesh, cfg.points, stream_seed(seed, STAGE_VARIATION, 1, 0))?;
    Ok(normalize_for_eval(&pts)?)
}

/// `d[v][b]`: Chamfer distance from every variation to every reference.
pub fn distance_matrix(variations: &[Vec<Point3>], reference: &[Vec<Point3>]) -> Result<Vec<Vec<f64>>> {
    variations
        .iter()
        .map(|v| reference.iter().map(|b| Ok(chamfer_distance(v, b)?)).collect())
        .collect()
}

fn check_matrix(d: &[Vec<f64>], n_ref: usize) -> Result<()> {
    if d.is_empty() || n_ref == 0 || d.iter().any(|r| r.len() != n_ref) {
        return Err(Error::InvalidArgument("coverage and MMD need non-empty, rectangular distances".into()));
    }
    Ok(())
}

/// Percentage of references that are the nearest one to some variation.
/// `ref_ids` breaks distance ties toward the lower shape id.
pub fn coverage_from_distances(d: &[Vec<f64>], ref_ids: &[u64]) -> Result<f64> {
    check_matrix(d, ref_ids.len())?;
    let mut hit = vec![false; ref_ids.len()];
    for row in d {
        let mut best = 0;
        for b in 1..row.len() {
            if row[b] < row[best] || (row[b] == row[best] && ref_ids[b] < ref_ids[best]) {
                best = b;
            }
        }
        hit[best] = true;
    }
    Ok(100.0 * hit.iter().filter(|&&h| h).count() as f64 / ref_ids.len() as f64)
}

/// Mean over references of the distance to the closest variation.
pub fn mmd_from_distances(d: &[Vec<f64>], n_ref: usize) -> Result<f64> {
    check_matrix(d, n_ref)?;
    let total: f64 = (0..n_ref).map(|b| d.iter().map(|row| row[b]).fold(f64::INFINITY, f64::min)).sum();
    Ok(total / n_ref as f64)
}

pub fn coverage(variations: &[Vec<Point3>], reference: &[(u64, Vec<Point3>)]) -> Result<f64> {
    let clouds: Vec<Vec<Point3>> = reference.iter().map(|r| r.1.clone()).collect();
    let ids: Vec<u64> = reference.iter().map(|r| r.0).collect();
    coverage_from_distances(&distance_matrix(variations, &clouds)?, &ids)
}

pub fn mmd(variations: &[Vec<Point3>], reference: &[(u64, Vec<Point3>)]) -> Result<f64> {
    let clouds: Vec<Vec<Point3>> = reference.iter().map(|r| r.1.clone()).collect();
    mmd_from_distances(&distance_matrix(variations, &clouds)?, clouds.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub a_cap: usize,
    pub variations_per_item: usize,
    pub variation: VariationConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { a_cap: 500, variations_per_item: 20, variation: VariationConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cov_pct: f64,
    pub mmd: f64,
    pub config: EvalConfig,
    pub split: EvalSplit,
    pub variation_seeds: Vec<u64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        format!(
            "metric  value\nCOV %   {:.2}\nMMD     {:.5}\n|A| = {}, |B| = {}, {} variations per item\n",
            self.cov_pct,
            self.mmd,
            self.split.a.len(),
            self.split.b.len(),
            self.config.variations_per_item
        )
    }
}

/// Variations of every shape in `A` (random donors from the whole collection)
/// scored against the ground-truth surfaces of `B`.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let ids = ds.ids();
    let split = EvalSplit::new(&ids, cfg.a_cap, cfg.seed)?;
    let codes: std::collections::BTreeMap<u64, LatentCode> =
        ds.shapes.iter().map(|r| Ok((r.shape_id, model.encode(&r.sampling.uniform)?))).collect::<Result<_>>()?;
    let mut variations = Vec::new();
    let mut seeds = Vec::new();
    for (ai, &a) in split.a.iter().enumerate() {
        for v in 0..cfg.variations_per_item {
            let seed = stream_seed(cfg.seed, STAGE_VARIATION, ai, v + 1);
            let donor = ids[ChaCha8Rng::seed_from_u64(seed).random_range(0..ids.len())];
            variations.push(generate_variation(model, &codes[&a], &codes[&donor], &cfg.variation, seed)?);
            seeds.push(seed);
        }
    }
    let mut reference = Vec::with_capacity(split.b.len());
    for &b in &split.b {
        let cloud = ds.get(b)?.surface_cloud(cfg.variation.points, stream_seed(cfg.seed, STAGE_SPLIT, 1, b as usize));
        reference.push((b, normalize_for_eval(&cloud)?));
    }
    let clouds: Vec<Vec<Point3>> = reference.iter().map(|r| r.1.clone()).collect();
    let d = distance_matrix(&variations, &clouds)?;
    Ok(EvalReport {
        cov_pct: coverage_from_distances(&d, &split.b)?,
        mmd: mmd_from_distances(&d, split.b.len())?,
        config: cfg.clone(),
        split,
        variation_seeds: seeds,
    })
}

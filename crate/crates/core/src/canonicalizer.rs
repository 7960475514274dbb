//! Point-cloud autoencoder whose output neurons correspond across a shape
//! collection. Averaging the decoded clouds index-wise gives a mean shape,
//! and farthest point sampling on that mean picks handle indices that are
//! shared by every shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::geometry::{farthest_point_sampling, KdTree, Point3};
use crate::nn::{checkpoint, AdamW, AdamWConfig, Graph, LayerSpec, Mlp, ParamStore, DEFAULT_NEGATIVE_SLOPE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalizerConfig {
    /// Decoded points per shape.
    pub output_points: usize,
    pub embed_channels: Vec<usize>,
    /// Widths of the encoder head after pooling; the last is the latent size.
    pub encoder_head: Vec<usize>,
    /// Decoder widths before the `3 * output_points` output layer.
    pub decoder_hidden: Vec<usize>,
    pub negative_slope: f64,
}

impl Default for CanonicalizerConfig {
    fn default() -> Self {
        Self {
            output_points: 512,
            embed_channels: vec![32, 64, 256],
            encoder_head: vec![128, 64, 64],
            decoder_hidden: vec![64, 128],
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }
}

impl CanonicalizerConfig {
    pub fn latent_dim(&self) -> usize {
        *self.encoder_head.last().expect("non-empty head")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Points fed to the encoder (and used as the Chamfer target) per shape.
    pub input_points: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CanonTrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 16, input_points: 512, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    config: CanonicalizerConfig,
    epoch: usize,
}

#[derive(Debug, Clone)]
pub struct CanonicalizerModel {
    pub config: CanonicalizerConfig,
    pub store: ParamStore,
    embed: Mlp,
    head: Mlp,
    decoder: Mlp,
}

fn to_matrix(points: &[Point3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i].component(j))
}

fn to_points(flat: &[f64]) -> Vec<Point3> {
    flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

impl CanonicalizerModel {
    pub fn new(config: CanonicalizerConfig, seed: u64) -> Result<Self> {
        if config.output_points == 0 || config.encoder_head.is_empty() || config.embed_channels.is_empty() {
            return Err(Error::InvalidArgument("empty canonicalizer dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slope = config.negative_slope;
        let embed = Mlp::new(&mut store, "canon.embed", &LayerSpec::point_embedding(3, &config.embed_channels, slope), &mut rng)?;
        let mut head_dims = vec![embed.out_dim()];
        head_dims.extend_from_slice(&config.encoder_head);
        let head = Mlp::new(&mut store, "canon.head", &LayerSpec::mlp(&head_dims, slope, false), &mut rng)?;
        let mut dec_dims = vec![config.latent_dim()];
        dec_dims.extend_from_slice(&config.decoder_hidden);
        dec_dims.push(3 * config.output_points);
        let decoder = Mlp::new(&mut store, "canon.decoder", &LayerSpec::mlp(&dec_dims, slope, false), &mut rng)?;
        Ok(Self { config, store, embed, head, decoder })
    }

    pub fn encode(&self, cloud: &[Point3]) -> Result<Array2<f64>> {
        let e = self.embed.infer(&self.store, &to_matrix(cloud), cloud.len())?;
        Ok(self.head.infer(&self.store, &e, 1)?)
    }

    /// The `output_points` decoded points for one input cloud.
    pub fn decode_cloud(&self, cloud: &[Point3]) -> Result<Vec<Point3>> {
        if cloud.is_empty() {
            return Err(Error::InvalidArgument("empty point cloud".into()));
        }
        let z = self.encode(cloud)?;
        let out = self.decoder.infer(&self.store, &z, 1)?;
        Ok(to_points(out.as_slice().expect("standard layout")))
    }

    /// Mean Chamfer loss over a batch of equally sized clouds, on the tape.
    fn batch_loss(&self, clouds: &[Vec<Point3>]) -> Result<(Graph, crate::nn::Var)> {
        let n = clouds[0].len();
        let mut x = Array2::<f64>::zeros((clouds.len() * n, 3));
        for (i, c) in clouds.iter().enumerate() {
            if c.len() != n {
                return Err(Error::ShapeMismatch("clouds in a batch must have equal sizes".into()));
            }
            for (k, p) in c.iter().enumerate() {
                for j in 0..3 {
                    x[[i * n + k, j]] = p.component(j);
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let e = self.embed.forward(&mut g, &self.store, xv, n)?;
        let z = self.head.forward(&mut g, &self.store, e, 1)?;
        let out = self.decoder.forward(&mut g, &self.store, z, 1)?;
        let m = self.config.output_points;
        let mut terms = Vec::with_capacity(clouds.len());
        for (i, c) in clouds.iter().enumerate() {
            let row = g.slice_rows(out, i, i + 1);
            let pts = g.reshape(row, m, 3);
            terms.push(g.chamfer(pts, c));
        }
        let stacked = g.concat_rows(&terms);
        let loss = g.mean(stacked);
        Ok((g, loss))
    }

    pub fn save(&self, dir: &Path, epoch: usize) -> Result<()> {
        let manifest = Manifest { version: 1, kind: "canonicalizer".into(), config: self.config.clone(), epoch };
        Ok(checkpoint::save(dir, &manifest, &self.store, None)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = checkpoint::load_manifest(dir)?;
        if manifest.kind != "canonicalizer" {
            return Err(Error::CheckpointLoad(format!("{} is a {} checkpoint", dir.display(), manifest.kind)));
        }
        let mut model = Self::new(manifest.config, 0)?;
        checkpoint::restore(&checkpoint::load_blocks(dir)?, &mut model.store, None)?;
        Ok(model)
    }
}

/// Trains on `clouds` and returns the model with the mean loss of every epoch.
pub fn train_canonicalizer(
    clouds: &[Vec<Point3>],
    model_cfg: CanonicalizerConfig,
    cfg: &CanonTrainConfig,
) -> Result<(CanonicalizerModel, Vec<f64>)> {
    if clouds.is_empty() || cfg.batch_size == 0 || cfg.input_points == 0 {
        return Err(Error::InvalidArgument("empty collection or batch".into()));
    }
    if let Some(c) = clouds.iter().find(|c| c.len() < cfg.input_points) {
        return Err(Error::InvalidArgument(format!("cloud has {} points, need {}", c.len(), cfg.input_points)));
    }
    let mut model = CanonicalizerModel::new(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&model.store, AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: 0.0, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = sample(&mut rng, clouds.len(), clouds.len()).into_vec();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<Point3>> = chunk
                .iter()
                .map(|&i| {
                    let idx = sample(&mut rng, clouds[i].len(), cfg.input_points);
                    idx.iter().map(|k| clouds[i][k]).collect()
                })
                .collect();
            let (g, loss) = model.batch_loss(&batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("canonicalizer loss {value} at epoch {epoch}")));
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            opt.step(&mut model.store)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / clouds.len() as f64;
        info!("canonicalizer epoch {epoch}: chamfer {mean:.5}");
        history.push(mean);
    }
    Ok((model, history))
}

/// Index-wise average of decoded clouds.
pub fn mean_of(decoded: &[Vec<Point3>]) -> Result<Vec<Point3>> {
    let first = decoded.first().ok_or(Error::InvalidArgument("no decoded clouds".into()))?;
    let mut mean = vec![Point3::ORIGIN; first.len()];
    for cloud in decoded {
        if cloud.len() != mean.len() {
            return Err(Error::ShapeMismatch("decoded clouds differ in size".into()));
        }
        for (m, p) in mean.iter_mut().zip(cloud) {
            *m += *p;
        }
    }
    let k = 1.0 / decoded.len() as f64;
    Ok(mean.into_iter().map(|p| p * k).collect())
}

pub fn decode_all(model: &CanonicalizerModel, clouds: &[Vec<Point3>]) -> Result<Vec<Vec<Point3>>> {
    clouds.iter().map(|c| model.decode_cloud(c)).collect()
}

pub fn mean_shape(model: &CanonicalizerModel, clouds: &[Vec<Point3>]) -> Result<Vec<Point3>> {
    mean_of(&decode_all(model, clouds)?)
}

/// Handle indices shared across a collection and each shape's handle positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalHandles {
    pub handle_count: usize,
    pub indices: Vec<usize>,
    pub per_shape_positions: BTreeMap<u64, Vec<[f64; 3]>>,
}

impl CanonicalHandles {
    pub fn positions(&self, shape_id: u64) -> Option<Vec<Point3>> {
        self.per_shape_positions
            .get(&shape_id)
            .map(|v| v.iter().map(|&a| Point3::from_array(a)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.indices.is_empty() && self.indices.len() != self.handle_count {
            return Err(Error::ShapeMismatch(format!("{} indices for {} handles", self.indices.len(), self.handle_count)));
        }
        for (id, p) in &self.per_shape_positions {
            if p.len() != self.handle_count || p.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::ShapeMismatch(format!("shape {id} has malformed handles")));
            }
        }
        Ok(())
    }

    /// Writes the handles into the dataset records; returns how many shapes were updated.
    /// Shapes missing from the file keep their previous handles.
    pub fn apply_to(&self, ds: &mut Dataset) -> Result<usize> {
        self.validate()?;
        ds.handle_count = self.handle_count;
        let mut updated = 0;
        for rec in &mut ds.shapes {
            match self.positions(rec.shape_id) {
                Some(p) => {
                    rec.handles = Some(p);
                    updated += 1;
                }
                None => {
                    if rec.handles.as_ref().is_some_and(|h| h.len() != self.handle_count) {
                        rec.handles = None;
                    }
                }
            }
        }
        Ok(updated)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let h: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        h.validate()?;
        Ok(h)
    }
}

/// FPS over `mean` picks the indices; each shape's handles are its decoded
/// points at those indices, snapped to the nearest point of its own cloud.
pub fn handles_from_decoded(
    mean: &[Point3],
    decoded: &[Vec<Point3>],
    clouds: &[Vec<Point3>],
    shape_ids: &[u64],
    h: usize,
) -> Result<CanonicalHandles> {
    if decoded.len() != clouds.len() || clouds.len() != shape_ids.len() {
        return Err(Error::ShapeMismatch("decoded clouds, input clouds and ids differ in count".into()));
    }
    let indices = farthest_point_sampling(mean, h)?;
    let mut per_shape_positions = BTreeMap::new();
    for ((dec, cloud), &id) in decoded.iter().zip(clouds).zip(shape_ids) {
        let tree = KdTree::new(cloud);
        let pos = indices
            .iter()
            .map(|&i| cloud[tree.nearest(dec[i]).1].to_array())
            .collect();
        per_shape_positions.insert(id, pos);
    }
    Ok(CanonicalHandles { handle_count: h, indices, per_shape_positions })
}

/// `snap_clouds` (usually denser samples of the same surfaces) receive the
/// snapped handles; `clouds` feed the encoder.
pub fn derive_canonical_handles(
    model: &CanonicalizerModel,
    mean: &[Point3],
    clouds: &[Vec<Point3>],
    snap_clouds: &[Vec<Point3>],
    shape_ids: &[u64],
    h: usize,
) -> Result<CanonicalHandles> {
    if h > model.config.output_points {
        return Err(crate::geometry::GeometryError::KTooLarge { k: h, available: model.config.output_points }.into());
    }
    handles_from_decoded(mean, &decode_all(model, clouds)?, snap_clouds, shape_ids, h)
}

/// Surface clouds of every dataset shape, seeded per shape id.
pub fn dataset_clouds(ds: &Dataset, n: usize, seed: u64) -> Vec<Vec<Point3>> {
    ds.shapes
        .iter()
        .map(|s| s.surface_cloud(n, seed ^ s.shape_id.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ProcShape, ProcShapeParams};

    fn tiny() -> CanonicalizerConfig {
        CanonicalizerConfig {
            output_points: 32,
            embed_channels: vec![8, 16],
            encoder_head: vec![16, 8],
            decoder_hidden: vec![16],
            negative_slope: 0.01,
        }
    }

    fn cube_cloud(n: usize, seed: u64) -> Vec<Point3> {
        let shape = ProcShape::new(ProcShapeParams::unit_cube()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shape.surface_points(n, &mut rng).into_iter().map(|(p, _)| p).collect()
    }

    #[test]
    fn untrained_model_has_finite_loss() {
        let model = CanonicalizerModel::new(tiny(), 1).unwrap();
        let (g, l) = model.batch_loss(&[cube_cloud(40, 0)]).unwrap();
        assert!(g.scalar(l).is_finite());
        assert_eq!(model.decode_cloud(&cube_cloud(40, 0)).unwrap().len(), 32);
    }

    #[test]
    fn decoding_is_permutation_invariant() {
        let model = CanonicalizerModel::new(tiny(), 2).unwrap();
        let cloud = cube_cloud(50, 3);
        let mut rev = cloud.clone();
        rev.reverse();
        let a = model.decode_cloud(&cloud).unwrap();
        let b = model.decode_cloud(&rev).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!(p.distance(*q) < 1e-12);
        }
    }

    #[test]
    fn mean_of_two_points() {
        let a = vec![Point3::ORIGIN, Point3::new(1.0, 1.0, 1.0)];
        let b = vec![Point3::new(1.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0)];
        let m = mean_of(&[a.clone(), b]).unwrap();
        assert_eq!(m[0], Point3::new(0.5, 0.0, 0.0));
        assert_eq!(mean_of(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn repeated_shape_gets_identical_handles() {
        let model = CanonicalizerModel::new(tiny(), 4).unwrap();
        let cloud = cube_cloud(64, 5);
        let clouds = vec![cloud.clone(), cloud.clone(), cloud];
        let mean = mean_shape(&model, &clouds).unwrap();
        let h = derive_canonical_handles(&model, &mean, &clouds, &clouds, &[0, 1, 2], 4).unwrap();
        assert_eq!(h.indices.len(), 4);
        assert_eq!(h.per_shape_positions[&0], h.per_shape_positions[&1]);
        assert_eq!(h.per_shape_positions[&1], h.per_shape_positions[&2]);
        assert!(derive_canonical_handles(&model, &mean, &clouds, &clouds, &[0, 1, 2], 33).is_err());
    }

    #[test]
    fn handles_are_snapped_onto_input_cloud() {
        let model = CanonicalizerModel::new(tiny(), 6).unwrap();
        let cloud = cube_cloud(64, 7);
        let mean = mean_shape(&model, std::slice::from_ref(&cloud)).unwrap();
        let h = derive_canonical_handles(&model, &mean, std::slice::from_ref(&cloud), std::slice::from_ref(&cloud), &[9], 3).unwrap();
        for p in h.positions(9).unwrap() {
            assert!(cloud.contains(&p));
        }
    }

    #[test]
    fn training_reduces_loss_and_checkpoint_round_trips() {
        let clouds: Vec<_> = (0..4).map(|s| cube_cloud(64, s)).collect();
        let cfg = CanonTrainConfig { epochs: 40, batch_size: 2, input_points: 48, learning_rate: 3e-3, seed: 1 };
        let (model, hist) = train_canonicalizer(&clouds, tiny(), &cfg).unwrap();
        assert!(hist.last().unwrap() < &(0.5 * hist[0]), "{hist:?}");
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), 40).unwrap();
        let back = CanonicalizerModel::load(dir.path()).unwrap();
        assert_eq!(back.decode_cloud(&clouds[0]).unwrap(), model.decode_cloud(&clouds[0]).unwrap());
    }

    #[test]
    fn handles_file_round_trip() {
        let mut per = BTreeMap::new();
        per.insert(3u64, vec![[0.1, 0.2, 0.3]]);
        let h = CanonicalHandles { handle_count: 1, indices: vec![5], per_shape_positions: per };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        h.write(&path).unwrap();
        assert_eq!(CanonicalHandles::read(&path).unwrap(), h);
        let bad = CanonicalHandles { handle_count: 2, ..h };
        assert!(bad.validate().is_err());
    }
}

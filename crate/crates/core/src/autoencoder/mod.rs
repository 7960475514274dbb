//! The disentangled SDF autoencoder.
//!
//! Three point-cloud encoders read the uniform samples `S_u` of a shape: a
//! handle encoder with its own embedding (pre-trained, then frozen) and style
//! and residual encoders that share one embedding. The decoder maps
//! `[handles, style, xyz]` to a signed distance; the residual never reaches it.

mod decoder;
pub mod losses;
pub mod train;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, SdfSample};
use crate::nn::{checkpoint, AdamW, Graph, LayerSpec, Mlp, ParamId, ParamStore, Var, DEFAULT_NEGATIVE_SLOPE};
use crate::{Error, Result};

pub use decoder::{Decoder, SkipMode};
pub use losses::{Lambdas, LossValues, ShapeBatch};
pub use train::{
    pretrain_handle_encoder, train, EpochMetrics, PretrainConfig, PretrainReport, TrainConfig, TrainReport,
};

pub const HANDLE_PREFIX: &str = "ae.handle.";
pub const DECODER_PREFIX: &str = "ae.decoder.";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub handle_count: usize,
    pub style_dim: usize,
    pub residual_dim: usize,
    pub embed_channels: Vec<usize>,
    /// Hidden widths of the three encoder heads.
    pub head_hidden: Vec<usize>,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    /// Hidden layer (0-based) that receives the original decoder input again.
    pub skip_layer: Option<usize>,
    pub skip_mode: SkipMode,
    pub negative_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            handle_count: 8,
            style_dim: 32,
            residual_dim: 32,
            embed_channels: vec![32, 64, 256],
            head_hidden: vec![128, 64],
            decoder_width: 128,
            decoder_layers: 6,
            skip_layer: Some(3),
            skip_mode: SkipMode::Concat,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }
}

impl ModelConfig {
    /// A model with a few hundred parameters, for gradient checks.
    pub fn tiny(handle_count: usize) -> Self {
        Self {
            handle_count,
            style_dim: 2,
            residual_dim: 2,
            embed_channels: vec![3],
            head_hidden: vec![3],
            decoder_width: 4,
            decoder_layers: 3,
            skip_layer: Some(2),
            skip_mode: SkipMode::Concat,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }

    /// A reduced model that trains on one CPU core in minutes.
    pub fn desk(handle_count: usize) -> Self {
        Self {
            handle_count,
            style_dim: 8,
            residual_dim: 8,
            embed_channels: vec![32, 64, 128],
            head_hidden: vec![64],
            decoder_width: 64,
            decoder_layers: 4,
            skip_layer: Some(2),
            ..Self::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        3 * self.handle_count + self.style_dim
    }
}

/// One encoded shape. Handles are in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub handles: Vec<Point3>,
    pub style: Vec<f64>,
    pub residual: Vec<f64>,
}

impl LatentCode {
    /// `[h_1.x, h_1.y, h_1.z, ..., style...]`, the decoder's latent input.
    pub fn decoder_latent(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.handles.iter().flat_map(|p| p.to_array()).collect();
        v.extend_from_slice(&self.style);
        v
    }

    pub fn flat_handles(&self) -> Vec<f64> {
        self.handles.iter().flat_map(|p| p.to_array()).collect()
    }
}

pub(crate) fn points_from_flat(flat: &[f64]) -> Vec<Point3> {
    flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

/// The `n×4` encoder input `[x, y, z, d]`.
pub fn sample_matrix(samples: &[SdfSample]) -> Array2<f64> {
    Array2::from_shape_fn((samples.len(), 4), |(i, j)| match j {
        3 => samples[i].dist,
        _ => samples[i].pos.component(j),
    })
}

pub fn points_matrix(points: &[Point3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, j)| points[i].component(j))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    handle_embed: Mlp,
    handle_head: Mlp,
    shared_embed: Mlp,
    style_head: Mlp,
    residual_head: Mlp,
    pub decoder: Decoder,
    /// Learned per-handle weights, a 1×h row.
    pub h_w: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub lambdas: Lambdas,
    pub handle_count: usize,
    /// Completed stage-2 epochs.
    pub epoch: usize,
    pub handle_encoder_frozen: bool,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.handle_count == 0 || config.embed_channels.is_empty() {
            return Err(Error::InvalidArgument("model needs handles and an embedding".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slope = config.negative_slope;
        let embed_spec = LayerSpec::point_embedding(4, &config.embed_channels, slope);
        let head = |out: usize, embed: &Mlp| {
            let mut dims = vec![embed.out_dim()];
            dims.extend_from_slice(&config.head_hidden);
            dims.push(out);
            LayerSpec::mlp(&dims, slope, false)
        };
        let handle_embed = Mlp::new(&mut store, "ae.handle.embed", &embed_spec, &mut rng)?;
        let handle_head = Mlp::new(&mut store, "ae.handle.head", &head(3 * config.handle_count, &handle_embed), &mut rng)?;
        let shared_embed = Mlp::new(&mut store, "ae.shared.embed", &embed_spec, &mut rng)?;
        let style_head = Mlp::new(&mut store, "ae.style.head", &head(config.style_dim, &shared_embed), &mut rng)?;
        let residual_head = Mlp::new(&mut store, "ae.residual.head", &head(config.residual_dim, &shared_embed), &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            "ae.decoder",
            config.latent_dim(),
            config.decoder_width,
            config.decoder_layers,
            config.skip_layer,
            config.skip_mode,
            slope,
            &mut rng,
        )?;
        let h_w = store.add("ae.h_w", Array2::ones((1, config.handle_count)));
        Ok(Self { config, store, handle_embed, handle_head, shared_embed, style_head, residual_head, decoder, h_w })
    }

    pub fn freeze_handle_encoder(&mut self, frozen: bool) {
        self.store.set_frozen_prefix(HANDLE_PREFIX, frozen);
    }

    pub fn handle_encoder_frozen(&self) -> bool {
        self.store.blocks().iter().filter(|b| b.name.starts_with(HANDLE_PREFIX)).all(|b| b.frozen)
    }

    pub fn is_decoder_param(&self, id: ParamId) -> bool {
        self.store.block(id).name.starts_with(DECODER_PREFIX)
    }

    fn check_samples(&self, x: &Array2<f64>, n: usize) -> Result<()> {
        if x.ncols() != 4 || n == 0 || x.nrows() == 0 || !x.nrows().is_multiple_of(n) {
            return Err(Error::ShapeMismatch(format!("encoder input {:?} with {n} samples per shape", x.dim())));
        }
        Ok(())
    }

    /// Handle encoder on the tape; `x` holds `n` rows `[x, y, z, d]` per shape.
    pub fn handles_forward(&self, g: &mut Graph, x: Var, n: usize) -> Result<Var> {
        self.check_samples(g.value(x), n)?;
        let e = self.handle_embed.forward(g, &self.store, x, n)?;
        Ok(self.handle_head.forward(g, &self.store, e, 1)?)
    }

    /// Style and residual encoders on the tape.
    pub fn style_residual_forward(&self, g: &mut Graph, x: Var, n: usize) -> Result<(Var, Var)> {
        self.check_samples(g.value(x), n)?;
        let e = self.shared_embed.forward(g, &self.store, x, n)?;
        let s = self.style_head.forward(g, &self.store, e, 1)?;
        let r = self.residual_head.forward(g, &self.store, e, 1)?;
        Ok((s, r))
    }

    pub fn style_forward(&self, g: &mut Graph, x: Var, n: usize) -> Result<Var> {
        self.check_samples(g.value(x), n)?;
        let e = self.shared_embed.forward(g, &self.store, x, n)?;
        Ok(self.style_head.forward(g, &self.store, e, 1)?)
    }

    /// Tape-free encoder outputs for a batch: `(H, S, R)` with one row per shape.
    pub fn encode_matrix(&self, x: &Array2<f64>, n: usize) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        self.check_samples(x, n)?;
        let he = self.handle_embed.infer(&self.store, x, n)?;
        let h = self.handle_head.infer(&self.store, &he, 1)?;
        let se = self.shared_embed.infer(&self.store, x, n)?;
        let s = self.style_head.infer(&self.store, &se, 1)?;
        let r = self.residual_head.infer(&self.store, &se, 1)?;
        Ok((h, s, r))
    }

    pub fn encode(&self, uniform: &[SdfSample]) -> Result<LatentCode> {
        if uniform.is_empty() {
            return Err(Error::ShapeMismatch("no uniform samples to encode".into()));
        }
        let (h, s, r) = self.encode_matrix(&sample_matrix(uniform), uniform.len())?;
        Ok(LatentCode {
            handles: points_from_flat(h.as_slice().expect("standard layout")),
            style: s.iter().copied().collect(),
            residual: r.iter().copied().collect(),
        })
    }

    pub fn encode_handles(&self, uniform: &[SdfSample]) -> Result<Vec<Point3>> {
        let x = sample_matrix(uniform);
        self.check_samples(&x, uniform.len())?;
        let e = self.handle_embed.infer(&self.store, &x, uniform.len())?;
        let h = self.handle_head.infer(&self.store, &e, 1)?;
        Ok(points_from_flat(h.as_slice().expect("standard layout")))
    }

    pub fn encode_style(&self, uniform: &[SdfSample]) -> Result<Vec<f64>> {
        let x = sample_matrix(uniform);
        self.check_samples(&x, uniform.len())?;
        let e = self.shared_embed.infer(&self.store, &x, uniform.len())?;
        Ok(self.style_head.infer(&self.store, &e, 1)?.iter().copied().collect())
    }

    fn latent_row(&self, handles: &[Point3], style: &[f64]) -> Result<Array2<f64>> {
        if handles.len() != self.config.handle_count || style.len() != self.config.style_dim {
            return Err(Error::ShapeMismatch(format!(
                "latent with {} handles and {} style dims, model has {} and {}",
                handles.len(),
                style.len(),
                self.config.handle_count,
                self.config.style_dim
            )));
        }
        let mut v: Vec<f64> = handles.iter().flat_map(|p| p.to_array()).collect();
        v.extend_from_slice(style);
        Ok(Array2::from_shape_vec((1, v.len()), v).expect("row"))
    }

    /// Predicted signed distance at every query point.
    pub fn decode(&self, handles: &[Point3], style: &[f64], points: &[Point3]) -> Result<Vec<f64>> {
        let latent = self.latent_row(handles, style)?;
        if points.is_empty() {
            return Ok(Vec::new());
        }
        self.decoder.infer_one(&self.store, &latent, &points_matrix(points))
    }

    /// Decodes a full code; the residual is ignored by construction.
    pub fn decode_code(&self, code: &LatentCode, points: &[Point3]) -> Result<Vec<f64>> {
        self.decode(&code.handles, &code.style, points)
    }

    /// Decode then re-encode: the spliced shape as `S_u` samples at `positions`.
    pub fn reencode(&self, handles: &[Point3], style: &[f64], positions: &[Point3]) -> Result<LatentCode> {
        let d = self.decode(handles, style, positions)?;
        let samples: Vec<SdfSample> = positions.iter().zip(d).map(|(&p, d)| SdfSample::new(p, d)).collect();
        self.encode(&samples)
    }

    pub fn h_w(&self) -> Vec<f64> {
        self.store.value(self.h_w).iter().copied().collect()
    }

    pub fn save(&self, dir: &Path, manifest: &Manifest, opt: Option<&AdamW>) -> Result<()> {
        Ok(checkpoint::save(dir, manifest, &self.store, opt)?)
    }

    /// Rounds the live state to the stored precision, then saves it with the optimizer.
    pub fn checkpoint(&mut self, dir: &Path, manifest: &Manifest, opt: &mut AdamW) -> Result<()> {
        checkpoint::quantize(&mut self.store, Some(opt));
        self.save(dir, manifest, Some(opt))
    }

    /// Loads a checkpoint directory; the optimizer is restored when `opt` is given.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let manifest: Manifest = checkpoint::load_manifest(dir).map_err(|e| Error::CheckpointLoad(e.to_string()))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointLoad(format!("unsupported checkpoint version {}", manifest.version)));
        }
        if manifest.handle_count != manifest.config.handle_count {
            return Err(Error::CheckpointLoad("manifest handle counts disagree".into()));
        }
        let mut model = Self::new(manifest.config.clone(), 0)?;
        let blocks = checkpoint::load_blocks(dir).map_err(|e| Error::CheckpointLoad(e.to_string()))?;
        checkpoint::restore(&blocks, &mut model.store, None).map_err(|e| Error::CheckpointLoad(e.to_string()))?;
        model.freeze_handle_encoder(manifest.handle_encoder_frozen);
        Ok((model, manifest))
    }

    pub fn load_with_optimizer(dir: &Path, opt: &mut AdamW) -> Result<(Self, Manifest)> {
        let (mut model, manifest) = Self::load(dir)?;
        let blocks = checkpoint::load_blocks(dir).map_err(|e| Error::CheckpointLoad(e.to_string()))?;
        *opt = AdamW::new(&model.store, opt.config);
        checkpoint::restore(&blocks, &mut model.store, Some(opt)).map_err(|e| Error::CheckpointLoad(e.to_string()))?;
        Ok((model, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_positions;

    fn samples(n: usize, seed: u64) -> Vec<SdfSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_positions(n, &mut rng).into_iter().map(|p| SdfSample::new(p, p.norm() - 0.5)).collect()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            handle_count: 2,
            style_dim: 3,
            residual_dim: 3,
            embed_channels: vec![8, 16],
            head_hidden: vec![8],
            decoder_width: 16,
            decoder_layers: 3,
            skip_layer: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn encoding_ignores_sample_order() {
        let m = Model::new(small(), 1).unwrap();
        let s = samples(30, 2);
        let mut rev = s.clone();
        rev.reverse();
        let (a, b) = (m.encode(&s).unwrap(), m.encode(&rev).unwrap());
        for (x, y) in a.flat_handles().iter().zip(b.flat_handles()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.style.iter().chain(&a.residual).zip(b.style.iter().chain(&b.residual)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_style_head_outputs_its_bias() {
        let mut m = Model::new(small(), 3).unwrap();
        let w = m.store.find("ae.style.head.1.w").unwrap();
        let b = m.store.find("ae.style.head.1.b").unwrap();
        m.store.block_mut(w).value.fill(0.0);
        m.store.block_mut(b).value.assign(&ndarray::array![[0.5, -1.0, 2.0]]);
        assert_eq!(m.encode(&samples(10, 0)).unwrap().style, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn decoding_is_pointwise_and_finite() {
        let m = Model::new(small(), 4).unwrap();
        let code = m.encode(&samples(20, 1)).unwrap();
        let p = Point3::new(0.3, -0.2, 1.1);
        let corners = [Point3::new(-1.1, -1.1, -1.1), p, Point3::new(1.1, 1.1, 1.1), p];
        let d = m.decode_code(&code, &corners).unwrap();
        assert_eq!(d[1], d[3]);
        assert!(d.iter().all(|v| v.is_finite()));
        let alone = m.decode_code(&code, &[p]).unwrap();
        assert_eq!(alone[0], d[1]);
    }

    #[test]
    fn residual_never_reaches_the_decoder() {
        let m = Model::new(small(), 5).unwrap();
        let mut code = m.encode(&samples(20, 3)).unwrap();
        let pts: Vec<Point3> = samples(50, 4).iter().map(|s| s.pos).collect();
        let before = m.decode_code(&code, &pts).unwrap();
        code.residual.iter_mut().for_each(|r| *r += 10.0);
        assert_eq!(m.decode_code(&code, &pts).unwrap(), before);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut m = Model::new(small(), 6).unwrap();
        m.freeze_handle_encoder(true);
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: m.config.clone(),
            lambdas: Lambdas::default(),
            handle_count: 2,
            epoch: 0,
            handle_encoder_frozen: true,
            train: None,
        };
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), &manifest, None).unwrap();
        let (back, man) = Model::load(dir.path()).unwrap();
        assert!(back.handle_encoder_frozen());
        assert_eq!(man.handle_count, 2);
        let s = samples(25, 7);
        assert_eq!(back.encode(&s).unwrap(), m.encode(&s).unwrap());
        assert!(Model::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn wrong_latent_sizes_are_rejected() {
        let m = Model::new(small(), 7).unwrap();
        assert!(m.decode(&[Point3::ORIGIN], &[0.0; 3], &[Point3::ORIGIN]).is_err());
        assert!(m.encode(&[]).is_err());
    }
}

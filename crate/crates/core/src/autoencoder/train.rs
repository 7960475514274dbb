//! Two-stage training: supervised handle-encoder pre-training, then
//! end-to-end training of everything else with the handle encoder frozen.
//!
//! Randomness is derived from `(seed, epoch, batch)` so a run resumed from a
//! checkpoint replays the exact same batches.

use log::info;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{backward_masked, batch_terms, normalized_weights, split_objectives, Lambdas, LossValues, ShapeBatch};
use super::{points_matrix, Model};
use crate::dataset::{Dataset, ShapeRecord};
use crate::geometry::{uniform_positions, Point3, SdfSample, ShapeSampling};
use crate::nn::{AdamW, AdamWConfig, Graph};
use crate::{Error, Result};

pub(crate) fn stream_seed(seed: u64, stage: u64, epoch: usize, batch: usize) -> u64 {
    let mut x = seed ^ stage.wrapping_mul(0xa076_1d64_78bd_642f);
    x = x.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64;
    x = x.wrapping_mul(0xe703_7ed1_a0b4_28db) ^ batch as u64;
    x.wrapping_mul(0x8ebc_6af0_9c88_c6e3)
}

/// Training and held-out shape indices. The held-out set is drawn from
/// shapes that are not flagged as outliers.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut candidates: Vec<usize> = (0..ds.len()).filter(|&i| !ds.shapes[i].is_outlier()).collect();
    let count = ((candidates.len() as f64) * fraction).floor() as usize;
    let count = count.min(candidates.len().saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4_01d0_u64);
    candidates.shuffle(&mut rng);
    let mut held: Vec<usize> = candidates[..count].to_vec();
    held.sort_unstable();
    let train = (0..ds.len()).filter(|i| !held.contains(i)).collect();
    (train, held)
}

/// Samplings for one batch. Generated shapes are re-evaluated analytically at
/// a fresh shared position set; external shapes use one shared subset of
/// their stored samples.
pub fn batch_samplings(records: &[&ShapeRecord], n_uniform: usize, n_surface: usize, resample: bool, seed: u64) -> Result<Vec<ShapeSampling>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes: Vec<_> = records.iter().map(|r| r.proc_shape()).collect();
    let analytic = resample && shapes.iter().all(|s| s.is_some());
    let stored_u = records.iter().map(|r| r.sampling.uniform.len()).min().unwrap_or(0);
    let stored_s = records.iter().map(|r| r.sampling.surface.len()).min().unwrap_or(0);
    if !analytic && stored_u < n_uniform {
        return Err(Error::InvalidArgument(format!("{stored_u} stored uniform samples, {n_uniform} requested")));
    }
    let n_surface = n_surface.min(stored_s);
    let uniform_idx = (!analytic).then(|| sample(&mut rng, stored_u, n_uniform).into_vec());
    let positions = analytic.then(|| uniform_positions(n_uniform, &mut rng));
    let surface_idx = sample(&mut rng, stored_s, n_surface).into_vec();
    let mut out = Vec::with_capacity(records.len());
    for (rec, shape) in records.iter().zip(&shapes) {
        let uniform = match (&positions, shape) {
            (Some(pos), Some(shape)) => pos.iter().map(|&p| SdfSample::new(p, shape.sdf(p))).collect(),
            _ => uniform_idx.as_ref().expect("stored path").iter().map(|&i| rec.sampling.uniform[i]).collect(),
        };
        let surface = surface_idx.iter().map(|&i| rec.sampling.surface[i]).collect();
        out.push(ShapeSampling::new(rec.shape_id, uniform, surface));
    }
    Ok(out)
}

fn stored_sampling(rec: &ShapeRecord, n_uniform: usize, n_surface: usize) -> ShapeSampling {
    let nu = n_uniform.min(rec.sampling.uniform.len());
    let ns = n_surface.min(rec.sampling.surface.len());
    ShapeSampling::new(rec.shape_id, rec.sampling.uniform[..nu].to_vec(), rec.sampling.surface[..ns].to_vec())
}

fn handles_of(rec: &ShapeRecord, h: usize) -> Result<&[Point3]> {
    match &rec.handles {
        Some(v) if v.len() == h => Ok(v),
        _ => Err(Error::MissingHandles(rec.shape_id)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub n_uniform: usize,
    pub holdout_fraction: f64,
    pub resample: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.005,
            n_uniform: 2048,
            holdout_fraction: 0.1,
            resample: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean squared handle error per epoch.
    pub history: Vec<f64>,
    /// Mean per-handle Euclidean error on the training and held-out shapes.
    pub train_error: f64,
    pub holdout_error: Option<f64>,
    pub holdout_ids: Vec<u64>,
}

/// Mean Euclidean distance between predicted and given handles.
pub fn handle_error(model: &Model, records: &[&ShapeRecord], n_uniform: usize) -> Result<f64> {
    let h = model.config.handle_count;
    let mut total = 0.0;
    for rec in records {
        let target = handles_of(rec, h)?;
        let s = stored_sampling(rec, n_uniform, 0);
        let pred = model.encode_handles(&s.uniform)?;
        total += pred.iter().zip(target).map(|(a, b)| a.distance(*b)).sum::<f64>() / h as f64;
    }
    Ok(total / records.len().max(1) as f64)
}

/// Fits the handle encoder to the dataset handles with an L2 loss, then freezes it.
pub fn pretrain_handle_encoder(model: &mut Model, ds: &Dataset, cfg: &PretrainConfig) -> Result<PretrainReport> {
    let h = model.config.handle_count;
    for rec in &ds.shapes {
        handles_of(rec, h)?;
    }
    let (train_idx, held_idx) = holdout_split(ds, cfg.holdout_fraction, cfg.seed);
    model.freeze_handle_encoder(false);
    let prefix = super::HANDLE_PREFIX;
    let others: Vec<_> = model.store.ids().filter(|&id| !model.store.block(id).name.starts_with(prefix)).collect();
    for &id in &others {
        model.store.set_frozen(id, true);
    }
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        order.clone_from(&train_idx);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1, epoch, usize::MAX)));
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let recs: Vec<&ShapeRecord> = chunk.iter().map(|&i| &ds.shapes[i]).collect();
            let samplings = batch_samplings(&recs, cfg.n_uniform, 0, cfg.resample, stream_seed(cfg.seed, 1, epoch, bi))?;
            let n = cfg.n_uniform;
            let mut x = Array2::zeros((recs.len() * n, 4));
            let mut target = Array2::zeros((recs.len(), 3 * h));
            for (i, (s, rec)) in samplings.iter().zip(&recs).enumerate() {
                x.slice_mut(ndarray::s![i * n..(i + 1) * n, ..]).assign(&super::sample_matrix(&s.uniform));
                for (k, p) in handles_of(rec, h)?.iter().enumerate() {
                    for j in 0..3 {
                        target[[i, 3 * k + j]] = p.component(j);
                    }
                }
            }
            let mut g = Graph::new();
            let xv = g.constant(x);
            let pred = model.handles_forward(&mut g, xv, n)?;
            let t = g.constant(target);
            let d = g.sub(pred, t);
            let sq = g.square(d);
            let s = g.sum(sq);
            let loss = g.scale(s, 1.0 / (recs.len() * h) as f64);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("handle pre-training loss {value} at epoch {epoch}")));
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            opt.step(&mut model.store)?;
            total += value * recs.len() as f64;
        }
        let mean = total / train_idx.len().max(1) as f64;
        if epoch % 25 == 0 || epoch + 1 == cfg.epochs {
            info!("handle pre-training epoch {epoch}: mse {mean:.6}");
        }
        history.push(mean);
    }
    for &id in &others {
        model.store.set_frozen(id, false);
    }
    model.freeze_handle_encoder(true);
    let train_recs: Vec<&ShapeRecord> = train_idx.iter().map(|&i| &ds.shapes[i]).collect();
    let held_recs: Vec<&ShapeRecord> = held_idx.iter().map(|&i| &ds.shapes[i]).collect();
    let train_error = handle_error(model, &train_recs, cfg.n_uniform)?;
    let holdout_error = if held_recs.is_empty() { None } else { Some(handle_error(model, &held_recs, cfg.n_uniform)?) };
    Ok(PretrainReport { history, train_error, holdout_error, holdout_ids: held_recs.iter().map(|r| r.shape_id).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambdas: Lambdas,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate from `lr_drop_epoch` on.
    pub late_learning_rate: f64,
    pub lr_drop_epoch: usize,
    pub weight_decay: f64,
    pub n_uniform: usize,
    pub n_surface: usize,
    pub holdout_fraction: f64,
    pub resample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            epochs: 600,
            batch_size: 16,
            learning_rate: 1e-3,
            late_learning_rate: 2e-4,
            lr_drop_epoch: 300,
            weight_decay: 0.005,
            n_uniform: 2048,
            n_surface: 2048,
            holdout_fraction: 0.1,
            resample: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.learning_rate
        } else {
            self.late_learning_rate
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_lip: f64,
    pub l_ind: f64,
    pub l_spen: f64,
    pub l_rpen: f64,
    pub holdout_rec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub holdout_ids: Vec<u64>,
}

/// Weighted L1 reconstruction error of one shape without a tape.
pub fn reconstruction_error(model: &Model, s: &ShapeSampling) -> Result<f64> {
    let code = model.encode(&s.uniform)?;
    let latent = Array2::from_shape_vec((1, model.config.latent_dim()), code.decoder_latent()).expect("row");
    let mut total = 0.0;
    for (samples, weights) in [(&s.uniform, s.uniform_weights()), (&s.surface, s.surface_weights())] {
        if samples.is_empty() {
            continue;
        }
        let pts: Vec<Point3> = samples.iter().map(|x| x.pos).collect();
        let pred = model.decoder.infer_one(&model.store, &latent, &points_matrix(&pts))?;
        total += samples
            .iter()
            .zip(&pred)
            .zip(normalized_weights(&weights))
            .map(|((x, p), c)| (p - x.dist).abs() * c)
            .sum::<f64>();
    }
    Ok(total)
}

/// Runs stage-2 epochs `start_epoch..cfg.epochs`. `on_epoch` sees the
/// metrics, model and optimizer after every epoch (for logging and checkpoints).
/// Checkpoint with [`Model::checkpoint`] so the run stays identical to one
/// resumed from the saved state.
pub fn train<F>(model: &mut Model, opt: &mut AdamW, ds: &Dataset, cfg: &TrainConfig, start_epoch: usize, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(&EpochMetrics, &mut Model, &mut AdamW) -> Result<()>,
{
    if !model.handle_encoder_frozen() {
        return Err(Error::InvalidArgument("the handle encoder must be pre-trained and frozen first".into()));
    }
    if opt.m.len() != model.store.len() {
        return Err(Error::ShapeMismatch("optimizer does not match the model".into()));
    }
    let (train_idx, held_idx) = holdout_split(ds, cfg.holdout_fraction, cfg.seed);
    let held: Vec<ShapeSampling> = held_idx.iter().map(|&i| stored_sampling(&ds.shapes[i], cfg.n_uniform, cfg.n_surface)).collect();
    let decoder_ids = model.decoder.param_ids();
    let mut metrics = Vec::new();
    let mut order = train_idx.clone();
    for epoch in start_epoch..cfg.epochs {
        opt.set_learning_rate(cfg.learning_rate_at(epoch));
        order.clone_from(&train_idx);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2, epoch, usize::MAX)));
        let mut sum = LossValues::default();
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let recs: Vec<&ShapeRecord> = chunk.iter().map(|&i| &ds.shapes[i]).collect();
            let samplings = batch_samplings(&recs, cfg.n_uniform, cfg.n_surface, cfg.resample, stream_seed(cfg.seed, 2, epoch, bi))?;
            let refs: Vec<&ShapeSampling> = samplings.iter().collect();
            let batch = ShapeBatch::new(&refs)?;
            let mut g = Graph::new();
            let terms = batch_terms(model, &mut g, &batch)?;
            let v = terms.values(&g);
            if ![v.rec, v.lip, v.ind, v.spen, v.rpen].iter().all(|x| x.is_finite()) {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}: {v:?}")));
            }
            let (a, b) = split_objectives(&mut g, &terms, &cfg.lambdas);
            model.store.zero_grad();
            backward_masked(&decoder_ids, &g, a, b, &mut model.store)?;
            drop(g);
            opt.step(&mut model.store)?;
            sum.rec += v.rec;
            sum.lip += v.lip;
            sum.ind += v.ind;
            sum.spen += v.spen;
            sum.rpen += v.rpen;
            batches += 1;
        }
        let k = 1.0 / batches.max(1) as f64;
        let holdout_rec = if held.is_empty() {
            None
        } else {
            let errs: Result<Vec<f64>> = held.iter().map(|s| reconstruction_error(model, s)).collect();
            let errs = errs?;
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        };
        let m = EpochMetrics {
            epoch,
            l_rec: sum.rec * k,
            l_lip: sum.lip * k,
            l_ind: sum.ind * k,
            l_spen: sum.spen * k,
            l_rpen: sum.rpen * k,
            holdout_rec,
        };
        info!(
            "epoch {epoch}: rec {:.5} lip {:.5} ind {:.5} spen {:.4} rpen {:.4} holdout {:?}",
            m.l_rec, m.l_lip, m.l_ind, m.l_spen, m.l_rpen, m.holdout_rec
        );
        on_epoch(&m, model, opt)?;
        metrics.push(m);
    }
    Ok(TrainReport { metrics, holdout_ids: held_idx.iter().map(|&i| ds.shapes[i].shape_id).collect() })
}

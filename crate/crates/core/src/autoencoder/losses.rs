//! The five training losses and the masked total.
//!
//! Every loss is built on one [`Graph`] from a [`ShapeBatch`], so a training
//! step shares the encoder passes between terms. Pair terms use successive
//! batch items `(i, i + 1)` for `i < B - 1`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{sample_matrix, Model, ModelConfig};
use crate::geometry::{Point3, ShapeSampling};
use crate::nn::{Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub rec: f64,
    pub lip: f64,
    pub ind: f64,
    pub rpen: f64,
    pub spen: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { rec: 100.0, lip: 100.0, ind: 100.0, rpen: 1.0, spen: 0.1 }
    }
}

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub rec: f64,
    pub lip: f64,
    pub ind: f64,
    pub spen: f64,
    pub rpen: f64,
}

impl Lambdas {
    pub fn total(&self, v: &LossValues) -> f64 {
        self.rec * v.rec + self.lip * v.lip + self.ind * v.ind + self.rpen * v.rpen + self.spen * v.spen
    }
}

/// Per-sample coefficients `w / Σw`, or `1 / n` when every weight is zero.
pub fn normalized_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// Shape-difference term of the Lipschitz loss for two samplings that share
/// their uniform positions index by index.
pub fn lipschitz_shape_term(a: &ShapeSampling, b: &ShapeSampling) -> f64 {
    let (wa, wb) = (a.uniform_weights(), b.uniform_weights());
    let sum: f64 = a
        .uniform
        .iter()
        .zip(&b.uniform)
        .zip(wa.iter().zip(&wb))
        .map(|((p, q), (w1, w2))| (p.dist - q.dist).abs() * (w1 + w2))
        .sum();
    sum / (2.0 * a.uniform.len() as f64)
}

/// Precomputed constants for one batch of shapes.
#[derive(Debug, Clone)]
pub struct ShapeBatch {
    pub size: usize,
    pub n_uniform: usize,
    pub n_surface: usize,
    /// `(B·n_u)×4` encoder input.
    pub su_input: Array2<f64>,
    /// `(B·n_u)×3` uniform positions.
    pub su_xyz: Array2<f64>,
    /// `(B·(n_u+n_s))×3` reconstruction queries, shape by shape.
    pub rec_xyz: Array2<f64>,
    pub rec_target: Array2<f64>,
    pub rec_coef: Array2<f64>,
    /// Shape terms of the `B - 1` successive pairs, if positions are shared.
    pub lip_shape: Option<Vec<f64>>,
}

fn positions_shared(samplings: &[&ShapeSampling]) -> bool {
    let first = &samplings[0].uniform;
    samplings.iter().all(|s| s.uniform.iter().zip(first).all(|(a, b)| a.pos == b.pos))
}

impl ShapeBatch {
    pub fn new(samplings: &[&ShapeSampling]) -> Result<Self> {
        let first = samplings.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (n_u, n_s) = (first.uniform.len(), first.surface.len());
        if n_u == 0 {
            return Err(Error::InvalidArgument("shape without uniform samples".into()));
        }
        if samplings.iter().any(|s| s.uniform.len() != n_u || s.surface.len() != n_s) {
            return Err(Error::ShapeMismatch("sample counts differ within the batch".into()));
        }
        let b = samplings.len();
        let n = n_u + n_s;
        let mut su_input = Array2::zeros((b * n_u, 4));
        let mut rec_xyz = Array2::zeros((b * n, 3));
        let mut rec_target = Array2::zeros((b * n, 1));
        let mut rec_coef = Array2::zeros((b * n, 1));
        for (i, s) in samplings.iter().enumerate() {
            su_input.slice_mut(ndarray::s![i * n_u..(i + 1) * n_u, ..]).assign(&sample_matrix(&s.uniform));
            let coef_u = normalized_weights(&s.uniform_weights());
            let coef_s = if n_s > 0 { normalized_weights(&s.surface_weights()) } else { Vec::new() };
            for (k, (sample, c)) in s.uniform.iter().zip(&coef_u).chain(s.surface.iter().zip(&coef_s)).enumerate() {
                let r = i * n + k;
                for j in 0..3 {
                    rec_xyz[[r, j]] = sample.pos.component(j);
                }
                rec_target[[r, 0]] = sample.dist;
                rec_coef[[r, 0]] = *c;
            }
        }
        let su_xyz = su_input.slice(ndarray::s![.., 0..3]).to_owned();
        let lip_shape = positions_shared(samplings)
            .then(|| samplings.windows(2).map(|w| lipschitz_shape_term(w[0], w[1])).collect());
        Ok(Self { size: b, n_uniform: n_u, n_surface: n_s, su_input, su_xyz, rec_xyz, rec_target, rec_coef, lip_shape })
    }

    pub fn pairs(&self) -> usize {
        self.size.saturating_sub(1)
    }

    /// Uniform positions of batch item `i`.
    pub fn uniform_positions(&self, i: usize) -> Vec<Point3> {
        self.su_xyz
            .slice(ndarray::s![i * self.n_uniform..(i + 1) * self.n_uniform, ..])
            .rows()
            .into_iter()
            .map(|r| Point3::new(r[0], r[1], r[2]))
            .collect()
    }
}

/// Encoder outputs on the tape, one row per shape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h: Var,
    pub s: Var,
    pub r: Var,
}

pub fn encode_batch(model: &Model, g: &mut Graph, batch: &ShapeBatch) -> Result<Encoded> {
    let x = g.constant(batch.su_input.clone());
    let h = model.handles_forward(g, x, batch.n_uniform)?;
    let (s, r) = model.style_residual_forward(g, x, batch.n_uniform)?;
    Ok(Encoded { h, s, r })
}

/// Weighted L1 reconstruction over uniform and near-surface samples, averaged over the batch.
pub fn loss_rec(model: &Model, g: &mut Graph, batch: &ShapeBatch, enc: &Encoded) -> Result<Var> {
    let latent = g.concat_cols(&[enc.h, enc.s]);
    let xyz = g.constant(batch.rec_xyz.clone());
    let pred = model.decoder.forward(g, &model.store, latent, xyz)?;
    let target = g.constant(batch.rec_target.clone());
    let coef = g.constant(batch.rec_coef.clone());
    let err = g.sub(pred, target);
    let err = g.abs(err);
    let weighted = g.mul(err, coef);
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / batch.size as f64))
}

/// Latent distance of successive pairs: `‖H_w ΔH‖ + ‖ΔS‖ + ‖ΔR‖`, as a `(B-1)×1` column.
pub fn latent_pair_distances(model: &Model, g: &mut Graph, enc: &Encoded, b: usize) -> Var {
    let diff = |g: &mut Graph, v: Var| {
        let a = g.slice_rows(v, 0, b - 1);
        let c = g.slice_rows(v, 1, b);
        g.sub(a, c)
    };
    let dh = diff(g, enc.h);
    let hw = g.param(&model.store, model.h_w);
    let hw = g.repeat_each_col(hw, 3);
    let dh = g.mul_row(dh, hw);
    let nh = g.row_norms(dh);
    let ds = diff(g, enc.s);
    let ns = g.row_norms(ds);
    let dr = diff(g, enc.r);
    let nr = g.row_norms(dr);
    let t = g.add(nh, ns);
    g.add(t, nr)
}

/// Mean over pairs of `(shape term − latent term)²`. Zero for a single-item batch.
pub fn loss_lip(model: &Model, g: &mut Graph, batch: &ShapeBatch, enc: &Encoded) -> Result<Var> {
    if batch.size < 2 {
        return Ok(g.constant(Array2::zeros((1, 1))));
    }
    let shape = batch.lip_shape.as_ref().ok_or(Error::UnsharedPositions)?;
    let lat = latent_pair_distances(model, g, enc, batch.size);
    let c = g.constant(Array2::from_shape_vec((shape.len(), 1), shape.clone()).expect("column"));
    let d = g.sub(c, lat);
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / batch.pairs() as f64))
}

/// Batch mean of `‖style‖`.
pub fn loss_spen(g: &mut Graph, enc: &Encoded) -> Var {
    let n = g.row_norms(enc.s);
    g.mean(n)
}

/// Batch mean of `‖residual‖`.
pub fn loss_rpen(g: &mut Graph, enc: &Encoded) -> Var {
    let n = g.row_norms(enc.r);
    g.mean(n)
}

/// Splice successive pairs, decode at shape `i`'s uniform positions and
/// re-encode: handles of `[H_i, S_{i+1}]` should stay `H_i`, style of
/// `[H_{i+1}, S_i]` should stay `S_i`.
pub fn loss_ind(model: &Model, g: &mut Graph, batch: &ShapeBatch, enc: &Encoded) -> Result<Var> {
    let b = batch.size;
    if b < 2 {
        return Ok(g.constant(Array2::zeros((1, 1))));
    }
    let n = batch.n_uniform;
    let p = b - 1;
    let xyz_first = batch.su_xyz.slice(ndarray::s![..p * n, ..]).to_owned();
    let xyz = g.constant(xyz_first);
    let h_lo = g.slice_rows(enc.h, 0, p);
    let h_hi = g.slice_rows(enc.h, 1, b);
    let s_lo = g.slice_rows(enc.s, 0, p);
    let s_hi = g.slice_rows(enc.s, 1, b);

    let lat1 = g.concat_cols(&[h_lo, s_hi]);
    let d1 = model.decoder.forward(g, &model.store, lat1, xyz)?;
    let x1 = g.concat_cols(&[xyz, d1]);
    let h_re = model.handles_forward(g, x1, n)?;
    let e1 = g.sub(h_re, h_lo);
    let n1 = g.row_norms(e1);

    let lat2 = g.concat_cols(&[h_hi, s_lo]);
    let d2 = model.decoder.forward(g, &model.store, lat2, xyz)?;
    let x2 = g.concat_cols(&[xyz, d2]);
    let s_re = model.style_forward(g, x2, n)?;
    let e2 = g.sub(s_re, s_lo);
    let n2 = g.row_norms(e2);

    let both = g.concat_rows(&[n1, n2]);
    let total = g.sum(both);
    Ok(g.scale(total, 1.0 / p as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub rec: Var,
    pub lip: Var,
    pub ind: Var,
    pub spen: Var,
    pub rpen: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            rec: g.scalar(self.rec),
            lip: g.scalar(self.lip),
            ind: g.scalar(self.ind),
            spen: g.scalar(self.spen),
            rpen: g.scalar(self.rpen),
        }
    }
}

pub fn batch_terms(model: &Model, g: &mut Graph, batch: &ShapeBatch) -> Result<LossTerms> {
    let enc = encode_batch(model, g, batch)?;
    Ok(LossTerms {
        rec: loss_rec(model, g, batch, &enc)?,
        lip: loss_lip(model, g, batch, &enc)?,
        ind: loss_ind(model, g, batch, &enc)?,
        spen: loss_spen(g, &enc),
        rpen: loss_rpen(g, &enc),
    })
}

/// The decoder-reaching part `λ1 L_rec + λ3 L_ind` and the encoder-only part
/// `λ2 L_lip + λ4 L_rpen + λ5 L_spen`.
pub fn split_objectives(g: &mut Graph, t: &LossTerms, l: &Lambdas) -> (Var, Var) {
    let rec = g.scale(t.rec, l.rec);
    let ind = g.scale(t.ind, l.ind);
    let a = g.add(rec, ind);
    let lip = g.scale(t.lip, l.lip);
    let rpen = g.scale(t.rpen, l.rpen);
    let spen = g.scale(t.spen, l.spen);
    let b = g.add(lip, rpen);
    let b = g.add(b, spen);
    (a, b)
}

/// Accumulates gradients of the total loss into `store`, keeping the
/// encoder-only terms away from the decoder.
pub fn backward_masked(model_decoder_ids: &[crate::nn::ParamId], g: &Graph, a: Var, b: Var, store: &mut ParamStore) -> Result<()> {
    g.backward(a, store)?;
    g.backward_filtered(b, store, &|id| !model_decoder_ids.contains(&id))?;
    Ok(())
}

/// Loss selector for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rec,
    Lip,
    Ind,
    Spen,
    Rpen,
    MaskedTotal,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [Self::Rec, Self::Lip, Self::Ind, Self::Spen, Self::Rpen, Self::MaskedTotal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rec => "L_rec",
            Self::Lip => "L_lip",
            Self::Ind => "L_ind",
            Self::Spen => "L_spen",
            Self::Rpen => "L_rpen",
            Self::MaskedTotal => "masked total",
        }
    }

    fn pick(self, t: &LossTerms) -> Var {
        match self {
            Self::Rec => t.rec,
            Self::Lip => t.lip,
            Self::Ind => t.ind,
            Self::Spen => t.spen,
            Self::Rpen => t.rpen,
            Self::MaskedTotal => unreachable!("the total is assembled from two objectives"),
        }
    }
}

/// A randomly initialized tiny model (frozen handle encoder) and a batch of
/// three shapes sharing four uniform positions.
pub fn tiny_instance(seed: u64) -> (Model, Vec<ShapeSampling>) {
    use crate::geometry::SdfSample;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { head_hidden: vec![], decoder_width: 3, ..ModelConfig::tiny(1) };
    let mut model = Model::new(cfg, rng.random()).expect("valid tiny config");
    // Perturb away from zero biases and unit handle weights.
    for id in model.store.ids().collect::<Vec<_>>() {
        let dim = model.store.value(id).dim();
        model.store.block_mut(id).value += &Array2::from_shape_fn(dim, |_| rng.random_range(-0.3..0.3));
    }
    model.freeze_handle_encoder(true);
    let pt = |rng: &mut rand_chacha::ChaCha8Rng| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let shared: Vec<Point3> = (0..4).map(|_| pt(&mut rng)).collect();
    let samplings = (0..3)
        .map(|i| {
            let uniform = shared.iter().map(|&p| SdfSample::new(p, rng.random_range(-0.8..0.8))).collect();
            let surface = (0..3).map(|_| SdfSample::new(pt(&mut rng), rng.random_range(-0.2..0.2))).collect();
            ShapeSampling::new(i, uniform, surface)
        })
        .collect();
    (model, samplings)
}

/// Central-difference check of one loss (or the masked total) on a tiny instance.
pub fn gradient_check(kind: LossKind, seed: u64) -> Result<crate::nn::gradcheck::GradCheckReport> {
    use crate::nn::gradcheck::{check_gradients, check_stored_gradients};
    let (mut model, samplings) = tiny_instance(seed);
    let refs: Vec<&ShapeSampling> = samplings.iter().collect();
    let batch = ShapeBatch::new(&refs)?;
    let lambdas = Lambdas::default();
    let h = 1e-4;
    let template = model.clone();
    let build = |store: &ParamStore| {
        let mut probe = template.clone();
        probe.store = store.clone();
        let mut g = Graph::new();
        let terms = batch_terms(&probe, &mut g, &batch).expect("tiny batch is well formed");
        (g, terms)
    };
    if kind != LossKind::MaskedTotal {
        let mut store = model.store.clone();
        return Ok(check_gradients(&mut store, h, |s| {
            let (g, t) = build(s);
            (g, kind.pick(&t))
        }));
    }
    let decoder_ids = model.decoder.param_ids();
    let ids: Vec<_> = model.store.ids().filter(|&id| !model.store.block(id).frozen).collect();
    let (mut g, terms) = build(&model.store);
    let (a, b) = split_objectives(&mut g, &terms, &lambdas);
    model.store.zero_grad();
    backward_masked(&decoder_ids, &g, a, b, &mut model.store)?;
    let mut store = model.store.clone();
    Ok(check_stored_gradients(&mut store, h, &ids, |s, id| {
        let (mut g, t) = build(s);
        let (a, b) = split_objectives(&mut g, &t, &lambdas);
        let value = if decoder_ids.contains(&id) { g.scalar(a) } else { g.scalar(a) + g.scalar(b) };
        (value, g.kink_signature())
    }))
}

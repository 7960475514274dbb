//! The SDF decoder: `[handles, style, xyz] -> d` through a stack of hidden
//! layers, with the original input re-injected at a skip layer.
//!
//! The latent part of every layer that sees the input is projected once per
//! shape and repeated over that shape's query rows, which is the same map as
//! concatenating the latent to every point but far cheaper.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{kaiming_uniform, kernels, Graph, Linear, ParamId, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Hidden state and original input side by side into the skip layer.
    Concat,
    /// Original input zero-padded to the hidden width and added.
    Add,
}

#[derive(Debug, Clone, PartialEq)]
struct DecLayer {
    w_hid: Option<ParamId>,
    w_lat: Option<ParamId>,
    w_xyz: Option<ParamId>,
    b: ParamId,
    additive_skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    latent_dim: usize,
    width: usize,
    layers: Vec<DecLayer>,
    out: Linear,
    slope: f64,
}

/// Rows per chunk when decoding large query sets.
const INFER_CHUNK: usize = 16_384;

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        latent_dim: usize,
        width: usize,
        depth: usize,
        skip_layer: Option<usize>,
        skip_mode: SkipMode,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one hidden layer".into()));
        }
        if let Some(k) = skip_layer {
            if k == 0 || k >= depth {
                return Err(Error::InvalidArgument(format!("skip layer {k} outside 1..{depth}")));
            }
            if skip_mode == SkipMode::Add && latent_dim + 3 > width {
                return Err(Error::InvalidArgument("additive skip needs width >= latent + 3".into()));
            }
        }
        let input = latent_dim + 3;
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let p = format!("{name}.l{k}");
            let skip = skip_layer == Some(k);
            let layer = if k == 0 {
                DecLayer {
                    w_hid: None,
                    w_lat: Some(store.add(format!("{p}.w_lat"), kaiming_uniform(input, latent_dim, width, rng))),
                    w_xyz: Some(store.add(format!("{p}.w_xyz"), kaiming_uniform(input, 3, width, rng))),
                    b: store.add(format!("{p}.b"), Array2::zeros((1, width))),
                    additive_skip: false,
                }
            } else if skip && skip_mode == SkipMode::Concat {
                let fan_in = width + input;
                DecLayer {
                    w_hid: Some(store.add(format!("{p}.w"), kaiming_uniform(fan_in, width, width, rng))),
                    w_lat: Some(store.add(format!("{p}.w_lat"), kaiming_uniform(fan_in, latent_dim, width, rng))),
                    w_xyz: Some(store.add(format!("{p}.w_xyz"), kaiming_uniform(fan_in, 3, width, rng))),
                    b: store.add(format!("{p}.b"), Array2::zeros((1, width))),
                    additive_skip: false,
                }
            } else {
                DecLayer {
                    w_hid: Some(store.add(format!("{p}.w"), kaiming_uniform(width, width, width, rng))),
                    w_lat: None,
                    w_xyz: None,
                    b: store.add(format!("{p}.b"), Array2::zeros((1, width))),
                    additive_skip: skip,
                }
            };
            layers.push(layer);
        }
        let out = Linear::new(store, &format!("{name}.out"), width, 1, rng);
        Ok(Self { latent_dim, width, layers, out, slope })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check(&self, latent: (usize, usize), xyz: (usize, usize)) -> Result<usize> {
        if latent.1 != self.latent_dim || xyz.1 != 3 || latent.0 == 0 || !xyz.0.is_multiple_of(latent.0) {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects B×{} latents and (B·n)×3 points, got {latent:?} and {xyz:?}",
                self.latent_dim
            )));
        }
        Ok(xyz.0 / latent.0)
    }

    /// `latent` is B×L; `xyz` holds n query rows per latent row, shape by shape.
    /// Returns the (B·n)×1 predicted distances.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: Var, xyz: Var) -> Result<Var> {
        let n = self.check(g.value(latent).dim(), g.value(xyz).dim())?;
        let mut h = None::<Var>;
        for layer in &self.layers {
            let b = g.param(store, layer.b);
            let mut t = match (h, layer.w_hid) {
                (Some(hv), Some(w)) => {
                    let input = if layer.additive_skip {
                        let lat = g.repeat_rows(latent, n);
                        let rows = g.value(xyz).nrows();
                        let pad = g.constant(Array2::zeros((rows, self.width - self.latent_dim - 3)));
                        let x = g.concat_cols(&[lat, xyz, pad]);
                        g.add(hv, x)
                    } else {
                        hv
                    };
                    let w = g.param(store, w);
                    g.affine(input, w, b)
                }
                _ => {
                    let w = g.param(store, layer.w_xyz.expect("first layer sees xyz"));
                    g.affine(xyz, w, b)
                }
            };
            if h.is_some() {
                if let Some(wx) = layer.w_xyz {
                    let wx = g.param(store, wx);
                    let px = g.matmul(xyz, wx);
                    t = g.add(t, px);
                }
            }
            if let Some(wl) = layer.w_lat {
                let wl = g.param(store, wl);
                let pl = g.matmul(latent, wl);
                let pl = g.repeat_rows(pl, n);
                t = g.add(t, pl);
            }
            h = Some(g.leaky_relu(t, self.slope));
        }
        Ok(self.out.forward(g, store, h.expect("depth >= 1")))
    }

    fn infer_rows(&self, store: &ParamStore, latent: &Array2<f64>, xyz: &Array2<f64>, n: usize) -> Array2<f64> {
        let mut h: Option<Array2<f64>> = None;
        for layer in &self.layers {
            let b = store.value(layer.b);
            let mut t = match (&h, layer.w_hid) {
                (Some(hv), Some(w)) => {
                    if layer.additive_skip {
                        let lat = kernels::repeat_rows(latent, n);
                        let pad = Array2::zeros((xyz.nrows(), self.width - self.latent_dim - 3));
                        let x = kernels::concat_cols(&[&lat, xyz, &pad]);
                        let input = hv + &x;
                        kernels::affine(&input, store.value(w), b)
                    } else {
                        kernels::affine(hv, store.value(w), b)
                    }
                }
                _ => kernels::affine(xyz, store.value(layer.w_xyz.expect("first layer sees xyz")), b),
            };
            if h.is_some() {
                if let Some(wx) = layer.w_xyz {
                    t = &t + &xyz.dot(store.value(wx));
                }
            }
            if let Some(wl) = layer.w_lat {
                let pl = kernels::repeat_rows(&latent.dot(store.value(wl)), n);
                t = &t + &pl;
            }
            h = Some(kernels::leaky_relu(&t, self.slope));
        }
        self.out.infer(store, &h.expect("depth >= 1"))
    }

    /// Tape-free decoding of one latent row at any number of points.
    /// Matches [`Decoder::forward`] bit for bit.
    pub fn infer_one(&self, store: &ParamStore, latent: &Array2<f64>, xyz: &Array2<f64>) -> Result<Vec<f64>> {
        self.check(latent.dim(), (xyz.nrows().max(1), xyz.ncols()))?;
        if latent.nrows() != 1 {
            return Err(Error::ShapeMismatch("infer_one takes a single latent row".into()));
        }
        let mut out = Vec::with_capacity(xyz.nrows());
        let mut start = 0;
        while start < xyz.nrows() {
            let end = (start + INFER_CHUNK).min(xyz.nrows());
            let chunk = xyz.slice(ndarray::s![start..end, ..]).to_owned();
            out.extend(self.infer_rows(store, latent, &chunk, end - start).iter().copied());
            start = end;
        }
        Ok(out)
    }

    /// Tape-free batched decoding with the same layout as [`Decoder::forward`].
    pub fn infer(&self, store: &ParamStore, latent: &Array2<f64>, xyz: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.check(latent.dim(), xyz.dim())?;
        Ok(self.infer_rows(store, latent, xyz, n))
    }

    /// Every parameter block owned by the decoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.w_hid, l.w_lat, l.w_xyz].into_iter().flatten());
            ids.push(l.b);
        }
        ids.extend([self.out.w, self.out.b]);
        ids
    }
}

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{kernels, Graph, Var};
use super::params::{kaiming_uniform, ParamId, ParamStore};
use super::{NnError, Result};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    LeakyRelu,
    MaxPoolOverPoints,
    AvgPoolOverPoints,
    /// Max and average pooling side by side: `c -> 2c`.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub negative_slope: f64,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: LayerKind::Linear, in_dim, out_dim, negative_slope: 0.0 }
    }

    pub fn leaky_relu(dim: usize, slope: f64) -> Self {
        Self { kind: LayerKind::LeakyRelu, in_dim: dim, out_dim: dim, negative_slope: slope }
    }

    pub fn max_pool(dim: usize) -> Self {
        Self { kind: LayerKind::MaxPoolOverPoints, in_dim: dim, out_dim: dim, negative_slope: 0.0 }
    }

    pub fn avg_pool(dim: usize) -> Self {
        Self { kind: LayerKind::AvgPoolOverPoints, in_dim: dim, out_dim: dim, negative_slope: 0.0 }
    }

    pub fn pool_concat(dim: usize) -> Self {
        Self { kind: LayerKind::Concat, in_dim: dim, out_dim: 2 * dim, negative_slope: 0.0 }
    }

    /// Linear layers through `dims` with LeakyReLU between them (and after the
    /// last one when `final_activation`).
    pub fn mlp(dims: &[usize], slope: f64, final_activation: bool) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            out.push(Self::linear(w[0], w[1]));
            if i + 2 < dims.len() || final_activation {
                out.push(Self::leaky_relu(w[1], slope));
            }
        }
        out
    }

    /// Shared per-point stack over `channels`, then max+mean pooling.
    pub fn point_embedding(in_channels: usize, channels: &[usize], slope: f64) -> Vec<LayerSpec> {
        let mut dims = vec![in_channels];
        dims.extend_from_slice(channels);
        let mut out = Self::mlp(&dims, slope, true);
        out.push(Self::pool_concat(*dims.last().expect("non-empty")));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::with_fan_in(store, name, in_dim, out_dim, in_dim, rng)
    }

    /// A linear block that is one slice of a wider layer with `fan_in` total inputs.
    pub fn with_fan_in<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_uniform(fan_in, in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }

    pub fn infer(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        kernels::affine(x, store.value(self.w), store.value(self.b))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Linear(Linear),
    LeakyRelu(f64),
    MaxPool,
    AvgPool,
    PoolConcat,
}

/// A sequential stack built from [`LayerSpec`]s. Pooling layers reduce each
/// run of `points_per_item` consecutive rows to one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    specs: Vec<LayerSpec>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(NnError::ShapeMismatch(format!("{name}: no layers")));
        }
        for (i, pair) in specs.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NnError::ShapeMismatch(format!(
                    "{name}: layer {i} emits {} channels, layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut linear_count = 0;
        for spec in specs {
            let ok = match spec.kind {
                LayerKind::Concat => spec.out_dim == 2 * spec.in_dim,
                LayerKind::Linear => true,
                _ => spec.out_dim == spec.in_dim,
            };
            if !ok {
                return Err(NnError::ShapeMismatch(format!("{name}: inconsistent {:?} spec", spec.kind)));
            }
            layers.push(match spec.kind {
                LayerKind::Linear => {
                    let l = Linear::new(store, &format!("{name}.{linear_count}"), spec.in_dim, spec.out_dim, rng);
                    linear_count += 1;
                    Layer::Linear(l)
                }
                LayerKind::LeakyRelu => Layer::LeakyRelu(spec.negative_slope),
                LayerKind::MaxPoolOverPoints => Layer::MaxPool,
                LayerKind::AvgPoolOverPoints => Layer::AvgPool,
                LayerKind::Concat => Layer::PoolConcat,
            });
        }
        Ok(Self { layers, specs: specs.to_vec() })
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs.last().expect("non-empty").out_dim
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Linear(lin) => Some(lin),
            _ => None,
        })
    }

    fn has_pool(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::MaxPool | Layer::AvgPool | Layer::PoolConcat))
    }

    fn check_input(&self, rows: usize, cols: usize, points_per_item: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(NnError::ShapeMismatch(format!("expected {} input channels, got {cols}", self.in_dim())));
        }
        if rows == 0 {
            return Err(NnError::ShapeMismatch("empty input".into()));
        }
        if self.has_pool() && (points_per_item == 0 || !rows.is_multiple_of(points_per_item)) {
            return Err(NnError::ShapeMismatch(format!("{rows} rows do not split into items of {points_per_item}")));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, points_per_item: usize) -> Result<Var> {
        let (rows, cols) = g.value(x).dim();
        self.check_input(rows, cols, points_per_item)?;
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => l.forward(g, store, h),
                Layer::LeakyRelu(s) => g.leaky_relu(h, *s),
                Layer::MaxPool => g.segment_max(h, points_per_item),
                Layer::AvgPool => g.segment_mean(h, points_per_item),
                Layer::PoolConcat => {
                    let mx = g.segment_max(h, points_per_item);
                    let mn = g.segment_mean(h, points_per_item);
                    g.concat_cols(&[mx, mn])
                }
            };
        }
        Ok(h)
    }

    /// Tape-free evaluation; bit-identical to [`Mlp::forward`].
    pub fn infer(&self, store: &ParamStore, x: &Array2<f64>, points_per_item: usize) -> Result<Array2<f64>> {
        self.check_input(x.nrows(), x.ncols(), points_per_item)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => l.infer(store, &h),
                Layer::LeakyRelu(s) => kernels::leaky_relu(&h, *s),
                Layer::MaxPool => kernels::segment_max(&h, points_per_item).0,
                Layer::AvgPool => kernels::segment_mean(&h, points_per_item),
                Layer::PoolConcat => {
                    let mx = kernels::segment_max(&h, points_per_item).0;
                    let mn = kernels::segment_mean(&h, points_per_item);
                    kernels::concat_cols(&[&mx, &mn])
                }
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    fn leaky(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            0.01 * v
        }
    }

    #[test]
    fn identity_linear_is_identity() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[LayerSpec::linear(3, 3)], &mut rng(0)).unwrap();
        let lin = *mlp.linears().next().unwrap();
        store.block_mut(lin.w).value = Array2::eye(3);
        let x = array![[1.0, -2.0, 0.5]];
        assert_eq!(mlp.infer(&store, &x, 1).unwrap(), x);
    }

    #[test]
    fn leaky_relu_slope() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[LayerSpec::leaky_relu(1, 0.01)], &mut rng(0)).unwrap();
        assert_eq!(mlp.infer(&store, &array![[-1.0]], 1).unwrap()[[0, 0]], -0.01);
    }

    #[test]
    fn dimension_checks() {
        let mut store = ParamStore::new();
        let bad = [LayerSpec::linear(3, 4), LayerSpec::linear(5, 2)];
        assert!(matches!(Mlp::new(&mut store, "m", &bad, &mut rng(0)), Err(NnError::ShapeMismatch(_))));
        let mlp = Mlp::new(&mut store, "ok", &LayerSpec::mlp(&[3, 4, 2], 0.01, false), &mut rng(0)).unwrap();
        assert!(mlp.infer(&store, &Array2::zeros((2, 4)), 1).is_err());
        let emb = Mlp::new(&mut store, "e", &LayerSpec::point_embedding(4, &[8], 0.01), &mut rng(0)).unwrap();
        assert!(emb.infer(&store, &Array2::zeros((5, 4)), 2).is_err());
    }

    #[test]
    fn two_layer_mlp_matches_dense_oracle() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &LayerSpec::mlp(&[3, 5, 2], 0.01, false), &mut r).unwrap();
        let lins: Vec<Linear> = mlp.linears().copied().collect();
        for l in &lins {
            store.block_mut(l.b).value = random(1, l.out_dim, &mut r);
        }
        let x = random(4, 3, &mut r);
        let out = mlp.infer(&store, &x, 1).unwrap();
        let (w0, b0, w1, b1) = (
            store.value(lins[0].w),
            store.value(lins[0].b),
            store.value(lins[1].w),
            store.value(lins[1].b),
        );
        for i in 0..4 {
            let mut hidden = [0.0; 5];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut acc = b0[[0, j]];
                for k in 0..3 {
                    acc += x[[i, k]] * w0[[k, j]];
                }
                *hj = leaky(acc);
            }
            for j in 0..2 {
                let mut acc = b1[[0, j]];
                for (k, hk) in hidden.iter().enumerate() {
                    acc += hk * w1[[k, j]];
                }
                assert!((out[[i, j]] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embedding_of_single_point_with_identity_weights() {
        let mut store = ParamStore::new();
        let emb = Mlp::new(&mut store, "e", &LayerSpec::point_embedding(4, &[4], 0.01), &mut rng(0)).unwrap();
        let lin = *emb.linears().next().unwrap();
        store.block_mut(lin.w).value = Array2::eye(4);
        let x = array![[0.1, 0.2, 0.3, 0.4]];
        let out = emb.infer(&store, &x, 1).unwrap();
        assert_eq!(out, array![[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]]);
    }

    #[test]
    fn embedding_matches_per_point_oracle() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let emb = Mlp::new(&mut store, "e", &LayerSpec::point_embedding(4, &[3, 2], 0.01), &mut r).unwrap();
        let lins: Vec<Linear> = emb.linears().copied().collect();
        for l in &lins {
            let w = store.value(l.w) * 0.3;
            store.block_mut(l.w).value = w;
        }
        let x = random(3, 4, &mut r);
        let out = emb.infer(&store, &x, 3).unwrap();
        let per_point: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                let mut h: Vec<f64> = x.row(i).to_vec();
                for l in &lins {
                    let w = store.value(l.w);
                    h = (0..l.out_dim).map(|j| leaky((0..l.in_dim).map(|k| h[k] * w[[k, j]]).sum())).collect();
                }
                h
            })
            .collect();
        for c in 0..2 {
            let mx = per_point.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
            let mean = per_point.iter().map(|p| p[c]).sum::<f64>() / 3.0;
            assert!((out[[0, c]] - mx).abs() < 1e-6);
            assert!((out[[0, 2 + c]] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_and_inference_agree_bitwise() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let emb = Mlp::new(&mut store, "e", &LayerSpec::point_embedding(4, &[6, 5], 0.01), &mut r).unwrap();
        let x = random(12, 4, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = emb.forward(&mut g, &store, xv, 4).unwrap();
        assert_eq!(g.value(y), &emb.infer(&store, &x, 4).unwrap());
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let specs = [
            LayerSpec::point_embedding(4, &[3], 0.01),
            LayerSpec::mlp(&[6, 2], 0.01, false),
        ]
        .concat();
        let net = Mlp::new(&mut store, "n", &specs, &mut r).unwrap();
        let x = random(6, 4, &mut r);
        let report = check_gradients(&mut store, 1e-4, |s| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = net.forward(&mut g, s, xv, 3).unwrap();
            let sq = g.square(y);
            let l = g.sum(sq);
            (g, l)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 20);
    }

    #[test]
    fn separate_pools() {
        let mut store = ParamStore::new();
        let specs = [LayerSpec::max_pool(2)];
        let mx = Mlp::new(&mut store, "a", &specs, &mut rng(0)).unwrap();
        let av = Mlp::new(&mut store, "b", &[LayerSpec::avg_pool(2)], &mut rng(0)).unwrap();
        let x = array![[1.0, 4.0], [3.0, -2.0], [0.0, 0.0], [2.0, 2.0]];
        assert_eq!(mx.infer(&store, &x, 2).unwrap(), array![[3.0, 4.0], [2.0, 2.0]]);
        assert_eq!(av.infer(&store, &x, 2).unwrap(), array![[2.0, 1.0], [1.0, 1.0]]);
    }
}

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};
use super::{NnError, Result};
use crate::geometry::{KdTree, Point3};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine(Var, Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    RowNorms(Var),
    Sum(Var),
    SegmentMax { x: Var, argmax: Vec<usize> },
    SegmentMean { x: Var, seg: usize },
    RepeatRows { x: Var, times: usize },
    RepeatEachCol { x: Var, times: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    // Gradient w.r.t. the predicted cloud is fixed once the nearest pairs are known.
    Chamfer { pred: Var, dpred: Array2<f64>, pairs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Shared numeric kernels; the tape and the tape-free inference paths both
/// call these so their outputs agree bit for bit.
pub(crate) mod kernels {
    use ndarray::{Array2, Axis};

    pub fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(w);
        y += b;
        y
    }

    pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
        x.mapv(|v| if v > 0.0 { v } else { slope * v })
    }

    /// Column-wise max over consecutive row segments; ties keep the first row.
    pub fn segment_max(x: &Array2<f64>, seg: usize) -> (Array2<f64>, Vec<usize>) {
        let groups = x.nrows() / seg;
        let cols = x.ncols();
        let mut out = Array2::<f64>::zeros((groups, cols));
        let mut arg = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = g * seg;
                for r in g * seg..(g + 1) * seg {
                    let v = x[[r, c]];
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out[[g, c]] = best;
                arg[g * cols + c] = best_r;
            }
        }
        (out, arg)
    }

    pub fn segment_mean(x: &Array2<f64>, seg: usize) -> Array2<f64> {
        let groups = x.nrows() / seg;
        let mut out = Array2::<f64>::zeros((groups, x.ncols()));
        for g in 0..groups {
            let block = x.slice(ndarray::s![g * seg..(g + 1) * seg, ..]);
            out.row_mut(g).assign(&(block.sum_axis(Axis(0)) / seg as f64));
        }
        out
    }

    pub fn concat_cols(parts: &[&Array2<f64>]) -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("row counts agree")
    }

    pub fn repeat_rows(x: &Array2<f64>, times: usize) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((x.nrows() * times, x.ncols()));
        for (i, row) in x.rows().into_iter().enumerate() {
            for t in 0..times {
                out.row_mut(i * times + t).assign(&row);
            }
        }
        out
    }
}

/// A reverse-mode tape. Every op evaluates eagerly and records how to
/// propagate gradients back to its inputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that accumulates a gradient but is not bound to a parameter.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let block = store.block(id);
        self.push(block.value.clone(), Op::Param(id), !block.frozen)
    }

    /// `x · w + b` with `b` a 1×c row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = kernels::affine(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, Op::Affine(x, w, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a single row");
        let value = self.value(x) * self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::MulRow(x, row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim());
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = kernels::leaky_relu(self.value(x), slope);
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let rg = self.rg(x);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    /// Euclidean norm of every row, as an n×1 column.
    pub fn row_norms(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = v
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::RowNorms(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn segment_max(&mut self, x: Var, seg: usize) -> Var {
        assert!(seg > 0 && self.value(x).nrows().is_multiple_of(seg), "rows not divisible by segment");
        let (value, argmax) = kernels::segment_max(self.value(x), seg);
        let rg = self.rg(x);
        self.push(value, Op::SegmentMax { x, argmax }, rg)
    }

    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Var {
        assert!(seg > 0 && self.value(x).nrows().is_multiple_of(seg), "rows not divisible by segment");
        let value = kernels::segment_mean(self.value(x), seg);
        let rg = self.rg(x);
        self.push(value, Op::SegmentMean { x, seg }, rg)
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let value = kernels::repeat_rows(self.value(x), times);
        let rg = self.rg(x);
        self.push(value, Op::RepeatRows { x, times }, rg)
    }

    /// Repeats each column `times` times consecutively: `[a, b] -> [a, a, b, b]`.
    pub fn repeat_each_col(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let mut value = Array2::<f64>::zeros((v.nrows(), v.ncols() * times));
        for ((r, c), &e) in v.indexed_iter() {
            for t in 0..times {
                value[[r, c * times + t]] = e;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::RepeatEachCol { x, times }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Array2<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_cols(&refs);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    /// Row-major reshape, e.g. a 1×3m decoder output to m×3 points.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.len(), rows * cols, "reshape changes the element count");
        let value = Array2::from_shape_vec((rows, cols), v.iter().copied().collect()).expect("element count checked");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Mean-distance Chamfer between the m×3 rows of `pred` and a fixed
    /// target cloud. Coincident nearest pairs get a zero subgradient.
    pub fn chamfer(&mut self, pred: Var, target: &[Point3]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.ncols(), 3, "chamfer expects xyz rows");
        let pts: Vec<Point3> = p.rows().into_iter().map(|r| Point3::new(r[0], r[1], r[2])).collect();
        let (np, nt) = (pts.len() as f64, target.len() as f64);
        let mut dpred = Array2::<f64>::zeros((pts.len(), 3));
        let mut add_dir = |i: usize, from: Point3, to: Point3, w: f64| {
            let d = from - to;
            let n = d.norm();
            if n > 0.0 {
                dpred[[i, 0]] += w * d.x / n;
                dpred[[i, 1]] += w * d.y / n;
                dpred[[i, 2]] += w * d.z / n;
            }
        };
        let mut pairs = Vec::with_capacity(pts.len() + target.len());
        let target_tree = KdTree::new(target);
        let mut forward = 0.0;
        for (i, &q) in pts.iter().enumerate() {
            let (d2, j) = target_tree.nearest(q);
            pairs.push(j);
            forward += d2.sqrt();
            add_dir(i, q, target[j], 0.5 / np);
        }
        let pred_tree = KdTree::new(&pts);
        let mut backward = 0.0;
        for &t in target {
            let (d2, i) = pred_tree.nearest(t);
            pairs.push(i);
            backward += d2.sqrt();
            add_dir(i, pts[i], t, 0.5 / nt);
        }
        let value = Array2::from_elem((1, 1), 0.5 * (forward / np + backward / nt));
        let rg = self.rg(pred);
        self.push(value, Op::Chamfer { pred, dpred, pairs }, rg)
    }

    /// Hash of every discrete branch taken during the forward pass. Finite
    /// differences are only meaningful when both probes share a signature.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(x, _) => {
                    for &v in self.value(*x).iter() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Abs(x) => {
                    for &v in self.value(*x).iter() {
                        (v > 0.0, v == 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } => argmax.hash(&mut h),
                Op::Chamfer { pairs, .. } => pairs.hash(&mut h),
                Op::RowNorms(x) => {
                    for r in self.value(*x).rows() {
                        (r.iter().all(|&v| v == 0.0)).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Accumulates d(loss)/d(param) into `store` for every trainable parameter.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_filtered(loss, store, &|_| true)
    }

    /// Like [`Graph::backward`], but only parameters accepted by `filter`
    /// receive gradient. Intermediate nodes are still traversed.
    pub fn backward_filtered(&self, loss: Var, store: &mut ParamStore, filter: &dyn Fn(ParamId) -> bool) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::GraphNotEvaluated(format!("node {} not on tape", loss.0)));
        }
        if self.value(loss).dim() != (1, 1) {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if filter(*id) {
                        store.accumulate_grad(*id, &g);
                    }
                }
                Op::Affine(x, w, b) => {
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g.dot(&self.value(*w).t()));
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, self.value(*x).t().dot(&g));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::MulRow(x, row) => {
                    if self.rg(*row) {
                        let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, &g * self.value(*row));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| *gv *= if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => accumulate(&mut grads, *x, &g * &(self.value(*x) * 2.0)),
                Op::RowNorms(x) => {
                    let xv = self.value(*x);
                    let mut gx = Array2::<f64>::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let n = node.value[[r, 0]];
                        if n > 0.0 {
                            let k = g[[r, 0]] / n;
                            gx.row_mut(r).assign(&(&xv.row(r) * k));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let dim = self.value(*x).dim();
                    accumulate(&mut grads, *x, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::SegmentMax { x, argmax } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).dim());
                    let cols = g.ncols();
                    for ((r, c), &gv) in g.indexed_iter() {
                        gx[[argmax[r * cols + c], c]] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMean { x, seg } => {
                    let scaled = &g / *seg as f64;
                    accumulate(&mut grads, *x, kernels::repeat_rows(&scaled, *seg));
                }
                Op::RepeatRows { x, times } => {
                    let rows = self.value(*x).nrows();
                    let mut gx = Array2::<f64>::zeros((rows, g.ncols()));
                    for r in 0..rows {
                        let block = g.slice(s![r * times..(r + 1) * times, ..]);
                        gx.row_mut(r).assign(&block.sum_axis(Axis(0)));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RepeatEachCol { x, times } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).dim());
                    for ((r, c), &gv) in g.indexed_iter() {
                        gx[[r, c / times]] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::<f64>::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let gx = Array2::from_shape_vec(dim, g.iter().copied().collect()).expect("same element count");
                    accumulate(&mut grads, *x, gx);
                }
                Op::Chamfer { pred, dpred, .. } => accumulate(&mut grads, *pred, dpred * g[[0, 0]]),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn squared_norm_gradient_is_twice_w() {
        let mut store = ParamStore::new();
        let w0 = array![[0.3, -1.2, 2.0]];
        let id = store.add("w", w0.clone());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.block(id).grad, w0 * 2.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, 2.0]]);
        let mut g = Graph::new();
        let _w = g.param(&store, id);
        let c = g.constant(array![[4.0]]);
        g.backward(c, &mut store).unwrap();
        assert!(store.block(id).grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_nodes() {
        let mut store = ParamStore::new();
        let g = Graph::new();
        assert!(matches!(g.backward(Var(3), &mut store), Err(NnError::GraphNotEvaluated(_))));
        let mut g = Graph::new();
        let v = g.constant(array![[1.0, 2.0]]);
        assert!(matches!(g.backward(v, &mut store), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient_but_pass_it_on() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[2.0]]);
        let b = store.add("b", array![[3.0]]);
        store.set_frozen(a, true);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let p = g.mul(va, vb);
        let loss = g.sum(p);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.block(a).grad[[0, 0]], 0.0);
        assert_eq!(store.block(b).grad[[0, 0]], 2.0);
    }

    #[test]
    fn leaky_relu_of_dot_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut store = ParamStore::new();
            let w = store.add("w", random(3, 1, &mut rng) * 0.5);
            let x = random(5, 3, &mut rng);
            let report = check_gradients(&mut store, 1e-4, |s| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.param(s, w);
                let y = g.matmul(xv, wv);
                let a = g.leaky_relu(y, 0.01);
                let l = g.sum(a);
                (g, l)
            });
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target: Vec<Point3> = (0..7)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        for trial in 0..10 {
            let mut store = ParamStore::new();
            let a = store.add("a", random(6, 3, &mut rng));
            let w = store.add("w", random(3, 4, &mut rng));
            let b = store.add("b", random(1, 4, &mut rng));
            let r = store.add("r", random(1, 2, &mut rng));
            let report = check_gradients(&mut store, 1e-4, |s| {
                let mut g = Graph::new();
                let (a, w, b, r) = (g.param(s, a), g.param(s, w), g.param(s, b), g.param(s, r));
                let y = g.affine(a, w, b);
                let y = g.leaky_relu(y, 0.01);
                let mx = g.segment_max(y, 3);
                let mn = g.segment_mean(y, 3);
                let pooled = g.concat_cols(&[mx, mn]);
                let rep = g.repeat_rows(pooled, 3);
                let left = g.slice_cols(rep, 0, 2);
                let rr = g.repeat_each_col(r, 1);
                let scaled = g.mul_row(left, rr);
                let shifted = g.add_row(scaled, rr);
                let stacked = g.concat_rows(&[shifted, left]);
                let part = g.slice_rows(stacked, 2, 9);
                let nrm = g.row_norms(part);
                let ab = g.abs(part);
                let sq = g.square(ab);
                let d = g.sub(sq, part);
                let e = g.add(d, part);
                let m = g.mul(e, part);
                let m = g.scale(m, 0.7);
                let s1 = g.sum(m);
                let s2 = g.mean(nrm);
                let ch = g.chamfer(a, &target);
                let flat = g.reshape(y, 8, 3);
                let ch2 = g.chamfer(flat, &target);
                let t = g.add(s1, s2);
                let t = g.add(t, ch);
                let t = g.add(t, ch2);
                (g, t)
            });
            assert!(report.max_rel_error < 1e-4, "trial {trial}: {report:?}");
            assert!(report.checked > report.skipped, "{report:?}");
        }
    }

    #[test]
    fn chamfer_value_matches_geometry_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random(9, 3, &mut rng);
        let target: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64 * 0.1, 0.2, -0.3)).collect();
        let pts: Vec<Point3> = p.rows().into_iter().map(|r| Point3::new(r[0], r[1], r[2])).collect();
        let mut g = Graph::new();
        let v = g.constant(p);
        let c = g.chamfer(v, &target);
        let expect = crate::geometry::chamfer_distance(&pts, &target).unwrap();
        assert!((g.scalar(c) - expect).abs() < 1e-14);
    }
}
